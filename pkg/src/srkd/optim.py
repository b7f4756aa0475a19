"""Optimizer construction, warm-up schedule, and the divergence guard."""

from __future__ import annotations

import torch

from .errors import TrainingDivergence

WARMUP_STEPS = 100
DIVERGENCE_FACTOR = 10.0
DIVERGENCE_PATIENCE = 100


def build_optimizer(params, lr: float, weight_decay: float = 1e-4) -> torch.optim.AdamW:
    return torch.optim.AdamW(params, lr=lr, weight_decay=weight_decay)


def build_warmup(optimizer, warmup_steps: int = WARMUP_STEPS):
    """Linear warm-up over the first `warmup_steps` steps, then constant."""
    return torch.optim.lr_scheduler.LambdaLR(
        optimizer, lambda step: min(1.0, (step + 1) / max(1, warmup_steps))
    )


class DivergenceGuard:
    """Raises once the loss stays above factor x initial for too many steps."""

    def __init__(self, factor: float = DIVERGENCE_FACTOR, patience: int = DIVERGENCE_PATIENCE):
        self.factor = factor
        self.patience = patience
        self.initial: float | None = None
        self.bad_steps = 0

    def check(self, loss: float, what: str = "training") -> None:
        if self.initial is None:
            self.initial = max(loss, 1e-12)
            return
        if loss > self.factor * self.initial:
            self.bad_steps += 1
            if self.bad_steps >= self.patience:
                raise TrainingDivergence(
                    f"{what} loss {loss:.4g} stayed above {self.factor:.0f}x the initial "
                    f"loss {self.initial:.4g} for {self.bad_steps} consecutive steps"
                )
        else:
            self.bad_steps = 0
