"""Noise schedules, forward noising, deterministic DDIM sampling, and EMA.

Everything here is network-agnostic: tensors are whatever array type the
caller uses (numpy or torch), schedules themselves are float64 numpy.
The terminal boundary uses alpha_bar(-1) == 1, so the final DDIM step emits
the model's clean estimate directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import ConfigurationError, NumericError, ShapeError

_REL_TOL = 1e-12


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step beta/alpha/alpha_bar arrays for a T-step forward process."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    kind: str = "linear"
    beta_start: float = float("nan")
    beta_end: float = float("nan")

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.shape != (self.T,):
            raise ConfigurationError(f"beta must have shape ({self.T},), got {beta.shape}")
        if not np.all((beta > 0.0) & (beta < 1.0)):
            raise ConfigurationError("every beta must lie strictly inside (0, 1)")
        alpha = np.asarray(self.alpha, dtype=np.float64)
        alpha_bar = np.asarray(self.alpha_bar, dtype=np.float64)
        if not np.allclose(alpha, 1.0 - beta, rtol=0, atol=0):
            raise ConfigurationError("alpha must equal 1 - beta exactly")
        ref = np.cumprod(alpha)
        if not np.allclose(alpha_bar, ref, rtol=_REL_TOL, atol=0):
            raise ConfigurationError("alpha_bar deviates from the cumulative product")
        if alpha_bar[-1] <= 0.0:
            raise ConfigurationError("alpha_bar must stay positive through step T")
        if np.any(np.diff(alpha_bar) >= 0.0):
            raise ConfigurationError("alpha_bar must be strictly decreasing")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "alpha_bar", alpha_bar)

    def alpha_bar_at(self, t: int) -> float:
        """alpha_bar for step index t; t == -1 is the clean-data boundary."""
        if t == -1:
            return 1.0
        if not 0 <= t < self.T:
            raise ConfigurationError(f"step index {t} outside [0, {self.T})")
        return float(self.alpha_bar[t])

    def to_dict(self) -> dict:
        return {
            "T": self.T,
            "kind": self.kind,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
        }

    @staticmethod
    def from_dict(d: dict) -> "NoiseSchedule":
        return build_schedule(d["T"], d["beta_start"], d["beta_end"], d.get("kind", "linear"))


def schedule_from_betas(beta: np.ndarray, kind: str = "custom") -> NoiseSchedule:
    """Build a schedule from raw beta values (used by property tests)."""
    beta = np.asarray(beta, dtype=np.float64)
    alpha = 1.0 - beta
    return NoiseSchedule(
        T=len(beta), beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha), kind=kind
    )


def build_schedule(
    T: int, beta_start: float = 1e-4, beta_end: float = 0.02, kind: str = "linear"
) -> NoiseSchedule:
    """Linear beta schedule over T steps."""
    if kind != "linear":
        raise ConfigurationError(f"unsupported schedule kind {kind!r}")
    if T < 1:
        raise ConfigurationError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigurationError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    return NoiseSchedule(
        T=T,
        beta=beta,
        alpha=alpha,
        alpha_bar=np.cumprod(alpha),
        kind=kind,
        beta_start=float(beta_start),
        beta_end=float(beta_end),
    )


def forward_noise(sched: NoiseSchedule, z0, t: int, eps):
    """z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps."""
    if getattr(eps, "shape", None) != getattr(z0, "shape", None):
        raise ShapeError(f"eps shape {getattr(eps, 'shape', None)} != z0 shape {getattr(z0, 'shape', None)}")
    abar = sched.alpha_bar_at(t)
    return math.sqrt(abar) * z0 + math.sqrt(1.0 - abar) * eps


def ddim_step(sched: NoiseSchedule, z_t, eps_pred, t: int, t_prev: int):
    """One deterministic reverse update from step t to t_prev (t_prev may be -1)."""
    if t_prev >= t:
        raise ConfigurationError(f"t_prev ({t_prev}) must be < t ({t})")
    abar_t = sched.alpha_bar_at(t)
    abar_p = sched.alpha_bar_at(t_prev)
    if abar_t == 0.0:
        raise NumericError("alpha_bar(t) == 0; cannot invert the noising step")
    x0_hat = (z_t - math.sqrt(1.0 - abar_t) * eps_pred) / math.sqrt(abar_t)
    return math.sqrt(abar_p) * x0_hat + math.sqrt(1.0 - abar_p) * eps_pred


@dataclass(frozen=True)
class DdimPlan:
    """Strictly increasing inference step indices; the last must be T-1."""

    indices: tuple[int, ...]
    eta: float = 0.0

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        if len(idx) < 1:
            raise ConfigurationError("plan needs at least one step")
        if idx[0] < 0:
            raise ConfigurationError(f"first plan index must be >= 0, got {idx[0]}")
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ConfigurationError("plan indices must be strictly increasing")
        if self.eta != 0.0:
            raise ConfigurationError("only the deterministic sampler (eta == 0) is supported")
        object.__setattr__(self, "indices", idx)

    @property
    def steps(self) -> int:
        return len(self.indices)


def make_plan(T: int, steps: int) -> DdimPlan:
    """Evenly spaced step subsequence of 0..T-1 ending at T-1."""
    if not 1 <= steps <= T:
        raise ConfigurationError(f"steps must be in [1, {T}], got {steps}")
    idx = np.unique(np.round(np.linspace(0, T - 1, steps)).astype(int))
    idx[-1] = T - 1
    return DdimPlan(indices=tuple(int(i) for i in idx))


def ddim_sample(
    sched: NoiseSchedule,
    plan: DdimPlan,
    denoise_fn: Callable,
    z_T,
    tap: Optional[Callable] = None,
):
    """Run the reverse chain over the plan (descending), returning the clean sample.

    `denoise_fn(z, t)` predicts the noise; `tap(t, z, eps)`, when given, is
    invoked exactly once per plan step.
    """
    if plan.indices[-1] >= sched.T:
        raise ConfigurationError(
            f"plan ends at {plan.indices[-1]} but schedule has T={sched.T}"
        )
    z = z_T
    idx = plan.indices
    for i in range(len(idx) - 1, -1, -1):
        t = idx[i]
        t_prev = idx[i - 1] if i > 0 else -1
        eps = denoise_fn(z, t)
        if not _all_finite(eps):
            raise NumericError(f"denoiser returned non-finite values at step t={t}")
        if tap is not None:
            tap(t, z, eps)
        z = ddim_step(sched, z, eps, t, t_prev)
    return z


def _all_finite(x) -> bool:
    if hasattr(x, "isfinite"):
        return bool(x.isfinite().all())
    return bool(np.all(np.isfinite(x)))


def gather_alpha_bar(sched: NoiseSchedule, t, like):
    """alpha_bar at per-sample steps t (torch long tensor), broadcastable to `like`."""
    import torch

    flat = t.reshape(-1).tolist()
    vals = [sched.alpha_bar_at(int(i)) for i in flat]
    out = torch.tensor(vals, dtype=like.dtype, device=like.device)
    return out.reshape((-1,) + (1,) * (like.ndim - 1))


def forward_noise_batch(sched: NoiseSchedule, z0, t, eps):
    """Batched forward noising with one step index per sample."""
    if eps.shape != z0.shape:
        raise ShapeError(f"eps shape {tuple(eps.shape)} != z0 shape {tuple(z0.shape)}")
    abar = gather_alpha_bar(sched, t, z0)
    return abar.sqrt() * z0 + (1.0 - abar).sqrt() * eps


def x0_estimate_batch(sched: NoiseSchedule, z_t, eps_pred, t):
    """Batched one-step clean estimate (the inner term of the reverse update)."""
    abar = gather_alpha_bar(sched, t, z_t)
    return (z_t - (1.0 - abar).sqrt() * eps_pred) / abar.sqrt()


@dataclass
class EmaState:
    """Exponential moving average of a named parameter set."""

    decay: float
    shadow: dict
    updates: int = 0

    @staticmethod
    def init(named_params, decay: float = 0.99) -> "EmaState":
        shadow = {name: p.detach().clone() for name, p in named_params}
        return EmaState(decay=decay, shadow=shadow)


def ema_update(state: EmaState, named_params) -> EmaState:
    """shadow <- decay * shadow + (1 - decay) * current, per tensor."""
    named = dict(named_params)
    for name, shadow in state.shadow.items():
        cur = named[name]
        if tuple(cur.shape) != tuple(shadow.shape):
            raise ShapeError(
                f"EMA shape mismatch for {name}: shadow {tuple(shadow.shape)} vs current {tuple(cur.shape)}"
            )
        shadow.mul_(state.decay).add_(cur.detach(), alpha=1.0 - state.decay)
    state.updates += 1
    return state


def ema_copy_to(state: EmaState, module) -> None:
    """Load shadow weights into a module (used on an inference clone)."""
    import torch

    with torch.no_grad():
        for name, p in module.named_parameters():
            if name in state.shadow:
                p.copy_(state.shadow[name])
