"""Synthetic paired multi-resolution phantom volumes.

High-resolution phantoms (the 7T analog) are soft ellipsoid fields; coarser
field strengths are produced by resolution-equivalent Gaussian blur on the
same grid.  The low-resolution volume is additionally corrupted by smooth
multiplicative bias fields and small gradient-warp displacement fields, the
same per-axis maps that are handed to the guided denoiser as conditioning.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, IntegrityError, StructuralError
from .rng import mix_seed, np_rng
from .volume import Axis, Volume, load_volume, save_volume

_GDNC_MAGIC = b"GDNC"
_GDNC_VERSION = 1

#: Default radial frequency (cycles/px) above which guidance fields must be
#: almost empty, and the maximum fraction of AC energy allowed above it.
GUIDANCE_CUTOFF = 0.15
GUIDANCE_MAX_HF_FRACTION = 0.01


class FieldStrength(Enum):
    """Scanner field strength with its equivalent isotropic voxel size."""

    F1_5 = ("1.5T", 2.0)
    F3 = ("3T", 1.5)
    F7 = ("7T", 0.7)

    def __init__(self, label: str, voxel_mm: float):
        self.label = label
        self.voxel_mm = voxel_mm

    @staticmethod
    def from_label(label: str) -> "FieldStrength":
        for fs in FieldStrength:
            if fs.label == label:
                return fs
        raise ConfigurationError(f"unknown field strength {label!r}; use 1.5T, 3T, or 7T")


@dataclass(frozen=True)
class PhantomSpec:
    """Deterministic recipe for one phantom volume."""

    shape: tuple[int, int, int]
    seed: int
    n_ellipsoids: int = 4
    contrast_mode: str = "t1"  # "t1": bright blobs on dark; "t2": inverted
    edge_sharpness: float = 8.0

    def __post_init__(self):
        if len(self.shape) != 3 or min(self.shape) < 8:
            raise ConfigurationError(
                f"phantom shape must be 3-D with every dim >= 8, got {self.shape}"
            )
        if self.n_ellipsoids < 1:
            raise ConfigurationError("n_ellipsoids must be >= 1")
        if self.contrast_mode not in ("t1", "t2"):
            raise ConfigurationError(f"contrast_mode must be t1 or t2, got {self.contrast_mode!r}")
        if self.edge_sharpness <= 0:
            raise ConfigurationError("edge_sharpness must be positive")


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    return q * np.sign(np.diag(r))


def _place_centers(rng, shape, radii_max, n):
    """Rejection-sample blob centers so bright regions stay disconnected."""
    dims = np.asarray(shape, dtype=np.float64)
    centers = []
    shrink = 1.0
    attempts = 0
    while len(centers) < n:
        attempts += 1
        if attempts % 40 == 0:
            shrink *= 0.85
        m = radii_max[len(centers)] * shrink
        lo = np.minimum(m + 1.0, dims / 2.0 - 0.5)
        hi = np.maximum(dims - 1.0 - m - 1.0, lo)
        c = rng.uniform(lo, hi)
        ok = True
        for j, prev in enumerate(centers):
            min_dist = 1.1 * (radii_max[j] * shrink + m) + 2.0
            if np.linalg.norm(c - prev) <= min_dist:
                ok = False
                break
        if ok:
            centers.append(c)
        if attempts > 500 * n:
            raise ConfigurationError(
                f"could not place {n} separated ellipsoids in shape {shape}"
            )
    return centers, shrink


def generate_phantom(spec: PhantomSpec) -> Volume:
    """Render the phantom described by spec; identical spec => identical bits."""
    rng = np_rng(spec.seed, "phantom")
    h, w, d = spec.shape
    min_dim = min(spec.shape)

    n = spec.n_ellipsoids
    base_r = rng.uniform(0.10, 0.18, size=n) * min_dim
    base_r = np.maximum(base_r, 1.5)
    aniso = rng.uniform(0.7, 1.3, size=(n, 3))
    radii = base_r[:, None] * aniso
    radii_max = radii.max(axis=1)
    centers, shrink = _place_centers(rng, spec.shape, radii_max, n)
    radii = radii * shrink
    amps = rng.uniform(0.78, 0.95, size=n)
    rots = [_random_rotation(rng) for _ in range(n)]

    grid = np.stack(
        np.meshgrid(np.arange(h), np.arange(w), np.arange(d), indexing="ij"),
        axis=-1,
    ).astype(np.float64)

    geometry = np.zeros(spec.shape, dtype=np.float64)
    for i in range(n):
        rel = (grid - centers[i]) @ rots[i].T / radii[i]
        q = np.sqrt((rel**2).sum(axis=-1))
        soft = 1.0 / (1.0 + np.exp(-spec.edge_sharpness * (1.0 - q)))
        np.maximum(geometry, amps[i] * soft, out=geometry)

    # Gently varying background so the field is not piecewise constant.
    texture = np.zeros(spec.shape)
    for _ in range(3):
        f = rng.uniform(0.01, 0.04)
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        phase = rng.uniform(0, 2 * np.pi)
        texture += np.cos(2 * np.pi * f * (grid @ direction) + phase)
    texture = (texture - texture.min()) / max(np.ptp(texture), 1e-12)
    background = 0.12 + 0.04 * texture

    intensity = background + (1.0 - background) * geometry
    if spec.contrast_mode == "t2":
        intensity = 1.0 - intensity
    intensity = np.clip(intensity, 0.0, 1.0)
    vox = FieldStrength.F7.voxel_mm
    return Volume(data=intensity.astype(np.float32), spacing=(vox, vox, vox))


# ---------------------------------------------------------------------------
# Resolution degradation
# ---------------------------------------------------------------------------

#: Pixels of Gaussian sigma per unit of (voxel ratio - 1).
K_RES_DEFAULT = 1.4


def gaussian_blur(arr: np.ndarray, sigma: float) -> np.ndarray:
    """Normalized (DC gain 1) isotropic Gaussian blur; sigma == 0 is a copy."""
    if sigma < 0:
        raise ConfigurationError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0.0:
        return np.array(arr, copy=True)
    out = ndimage.gaussian_filter(np.asarray(arr, dtype=np.float64), sigma=sigma, mode="reflect")
    return out.astype(arr.dtype, copy=False)


def resolution_sigma(
    to: FieldStrength, from_: FieldStrength = FieldStrength.F7, k_res: float = K_RES_DEFAULT
) -> float:
    """Blur strength (px) equivalent to degrading from one voxel size to another."""
    if to.voxel_mm < from_.voxel_mm:
        raise ConfigurationError(
            f"cannot degrade to a finer field: {from_.label} -> {to.label}"
        )
    return k_res * (to.voxel_mm / from_.voxel_mm - 1.0)


def degrade_to_field(
    v: Volume,
    to: FieldStrength,
    from_: FieldStrength = FieldStrength.F7,
    k_res: float = K_RES_DEFAULT,
) -> Volume:
    """Blur-only degradation at constant grid size (no resampling)."""
    sigma = resolution_sigma(to, from_, k_res)
    return Volume(data=gaussian_blur(v.data, sigma), spacing=v.spacing)


# ---------------------------------------------------------------------------
# Guidance fields
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GuidancePair:
    """Smooth multiplicative bias map and pixel-displacement warp field.

    bias: (h, w), mean 1.0, within [0.7, 1.3];
    warp: (2, h, w) row/col displacements, zero mean, magnitude <= 3 px.
    Both are band-limited: above `GUIDANCE_CUTOFF` cycles/px the spectra are
    essentially empty.
    """

    bias: np.ndarray
    warp: np.ndarray

    def __post_init__(self):
        bias = np.asarray(self.bias)
        warp = np.asarray(self.warp)
        if bias.ndim != 2:
            raise StructuralError(f"bias must be 2-D, got {bias.shape}")
        if warp.shape != (2,) + bias.shape:
            raise StructuralError(
                f"warp must have shape (2, h, w) matching bias {bias.shape}, got {warp.shape}"
            )
        object.__setattr__(self, "bias", bias)
        object.__setattr__(self, "warp", warp)

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.bias.shape)

    def validate(self) -> None:
        if abs(float(self.bias.mean()) - 1.0) > 1e-3:
            raise StructuralError(f"bias mean {self.bias.mean():.6f} not within 1e-3 of 1")
        if self.bias.min() < 0.7 or self.bias.max() > 1.3:
            raise StructuralError("bias exceeds [0.7, 1.3]")
        mag = np.sqrt((self.warp.astype(np.float64) ** 2).sum(axis=0))
        if mag.max() > 3.0:
            raise StructuralError(f"warp magnitude {mag.max():.3f} exceeds 3 px")
        if max(abs(float(self.warp[0].mean())), abs(float(self.warp[1].mean()))) > 1e-3:
            raise StructuralError("warp components must have zero mean")
        for name, fld in (("bias", self.bias - 1.0), ("warp_r", self.warp[0]), ("warp_c", self.warp[1])):
            frac = high_frequency_fraction(fld, GUIDANCE_CUTOFF)
            if frac >= GUIDANCE_MAX_HF_FRACTION:
                raise StructuralError(
                    f"{name} field not band-limited: {frac:.4f} of energy above cutoff"
                )


def high_frequency_fraction(field2d: np.ndarray, cutoff: float) -> float:
    """Fraction of non-DC spectral energy above the radial cutoff (cycles/px)."""
    f = np.asarray(field2d, dtype=np.float64)
    f = f - f.mean()
    spec = np.abs(np.fft.fft2(f)) ** 2
    fr = np.fft.fftfreq(f.shape[0])[:, None]
    fc = np.fft.fftfreq(f.shape[1])[None, :]
    radial = np.sqrt(fr**2 + fc**2)
    total = spec.sum()
    if total <= 0:
        return 0.0
    return float(spec[radial > cutoff].sum() / total)


def _mode_field(rng, shape, f_max: float) -> np.ndarray:
    """Random band-limited real field from exact low-frequency DFT bins.

    Synthesizing in the rfft domain keeps the spectrum exactly confined to
    the chosen bins (no windowing leakage); the DC bin stays zero, so the
    field has zero mean.  Output is normalized to max |.| == 1.
    """
    h, w = shape
    fr = np.fft.fftfreq(h)[:, None]
    fc = np.fft.rfftfreq(w)[None, :]
    radial = np.sqrt(fr**2 + fc**2)
    mask = (radial > 0) & (radial <= f_max)
    if not mask.any():
        return np.zeros(shape, dtype=np.float64)
    amp = np.zeros(mask.shape)
    amp[mask] = rng.uniform(0.2, 1.0, size=int(mask.sum()))
    phase = rng.uniform(0.0, 2.0 * np.pi, size=mask.shape)
    field = np.fft.irfft2(amp * np.exp(1j * phase), s=shape)
    peak = np.abs(field).max()
    if peak < 1e-12:
        return np.zeros(shape, dtype=np.float64)
    return field / peak


def synth_guidance(
    shape: tuple[int, int],
    seed: int,
    bias_amp: float = 0.18,
    warp_max: float = 1.5,
) -> GuidancePair:
    """Deterministically synthesize one band-limited bias/warp pair."""
    h, w = shape
    if h < 8 or w < 8:
        raise ConfigurationError(f"guidance shape must be >= 8 per dim, got {shape}")
    if not 0.0 <= bias_amp <= 0.25:
        raise ConfigurationError("bias_amp must lie in [0, 0.25] to respect the bias bounds")
    if not 0.0 <= warp_max <= 3.0:
        raise ConfigurationError("warp_max must lie in [0, 3] px")
    rng = np_rng(seed, "guidance")
    # Keep base frequencies below half the cutoff so exp() harmonics stay inside.
    f_max = GUIDANCE_CUTOFF / 2.0 * 0.9
    bias = np.exp(bias_amp * _mode_field(rng, shape, f_max))
    bias /= bias.mean()
    gr = _mode_field(rng, shape, f_max)
    gc = _mode_field(rng, shape, f_max)
    mag = np.sqrt(gr**2 + gc**2)
    peak = mag.max()
    scale = warp_max / peak if peak > 1e-9 else 0.0
    warp = np.stack([gr, gc], axis=0) * scale
    pair = GuidancePair(bias=bias.astype(np.float32), warp=warp.astype(np.float32))
    pair.validate()
    return pair


def apply_warp_2d(img: np.ndarray, warp: np.ndarray) -> np.ndarray:
    """Backward-warp a 2-D image by a (2, h, w) displacement field."""
    h, w = img.shape
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    coords = np.stack([rows - warp[0], cols - warp[1]], axis=0)
    return ndimage.map_coordinates(
        np.asarray(img, dtype=np.float64), coords, order=1, mode="nearest"
    )


def _warp_volume_along_axis(data: np.ndarray, axis: Axis, warp: np.ndarray) -> np.ndarray:
    out = np.empty_like(data)
    for d in range(data.shape[axis.dim]):
        sl = [slice(None)] * 3
        sl[axis.dim] = d
        sl = tuple(sl)
        out[sl] = apply_warp_2d(data[sl], warp)
    return out


def corrupt_volume(v: Volume, guidance: dict) -> Volume:
    """Apply per-axis warps then the combined per-axis bias product."""
    data = v.data.astype(np.float64)
    for axis in (Axis.AXIAL, Axis.CORONAL, Axis.SAGITTAL):
        data = _warp_volume_along_axis(data, axis, guidance[axis].warp.astype(np.float64))
    b_ax = guidance[Axis.AXIAL].bias.astype(np.float64)
    b_cor = guidance[Axis.CORONAL].bias.astype(np.float64)
    b_sag = guidance[Axis.SAGITTAL].bias.astype(np.float64)
    data = data * b_ax[:, :, None] * b_cor[None, :, :] * b_sag[:, None, :]
    return Volume(data=np.clip(data, 0.0, 1.0).astype(np.float32), spacing=v.spacing)


def save_guidance(path, pair: GuidancePair) -> None:
    bias = np.ascontiguousarray(pair.bias, dtype="<f4")
    warp = np.ascontiguousarray(pair.warp, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sH2I", _GDNC_MAGIC, _GDNC_VERSION, *bias.shape))
        fh.write(bias.tobytes(order="C"))
        fh.write(warp.tobytes(order="C"))


def load_guidance(path) -> GuidancePair:
    hdr = struct.calcsize("<4sH2I")
    with open(path, "rb") as fh:
        head = fh.read(hdr)
        if len(head) < hdr:
            raise IntegrityError(f"{path}: truncated header")
        magic, version, h, w = struct.unpack("<4sH2I", head)
        if magic != _GDNC_MAGIC or version != _GDNC_VERSION:
            raise IntegrityError(f"{path}: not a guidance container")
        bias = np.frombuffer(fh.read(4 * h * w), dtype="<f4").reshape(h, w)
        warp = np.frombuffer(fh.read(8 * h * w), dtype="<f4").reshape(2, h, w)
        if bias.size != h * w or warp.size != 2 * h * w:
            raise IntegrityError(f"{path}: truncated payload")
    return GuidancePair(bias=bias.copy(), warp=warp.copy())


# ---------------------------------------------------------------------------
# Dataset builder
# ---------------------------------------------------------------------------

_AXIS_KEYS = {Axis.AXIAL: "axial", Axis.CORONAL: "coronal", Axis.SAGITTAL: "sagittal"}
_KEY_AXES = {v: k for k, v in _AXIS_KEYS.items()}

#: Bias amplitude / warp strength used when corrupting the LR volume; three
#: per-axis fields combine, so each is kept modest.
DATASET_BIAS_AMP = 0.07
DATASET_WARP_MAX = 1.0


def _split_counts(n: int, fracs: tuple[float, float, float]) -> list[int]:
    if abs(sum(fracs) - 1.0) > 1e-9:
        raise ConfigurationError(f"split fractions must sum to 1, got {fracs}")
    raw = [f * n for f in fracs]
    counts = [int(np.floor(r)) for r in raw]
    remainders = [r - c for r, c in zip(raw, counts)]
    for _ in range(n - sum(counts)):
        i = int(np.argmax(remainders))
        counts[i] += 1
        remainders[i] = -1.0
    return counts


def _axis_slice_shape(shape: tuple[int, int, int], axis: Axis) -> tuple[int, int]:
    h, w, d = shape
    if axis is Axis.AXIAL:
        return (h, w)
    if axis is Axis.CORONAL:
        return (w, d)
    return (h, d)


def build_dataset(
    out_dir,
    n_samples: int,
    seed: int,
    split_fracs: tuple[float, float, float] = (0.8, 0.1, 0.1),
    shape: tuple[int, int, int] = (64, 64, 64),
    lr_field: FieldStrength = FieldStrength.F1_5,
    n_ellipsoids_range: tuple[int, int] = (3, 6),
    corrupt_lr: bool = True,
    k_res: float = K_RES_DEFAULT,
) -> dict:
    """Generate, corrupt, and persist n_samples paired phantom volumes."""
    if n_samples < 1:
        raise ConfigurationError("n_samples must be >= 1")
    out = Path(out_dir)
    sample_dir = out / "samples"
    sample_dir.mkdir(parents=True, exist_ok=True)

    counts = _split_counts(n_samples, split_fracs)
    order = np_rng(seed, "splits").permutation(n_samples)
    split_of = {}
    cursor = 0
    for split, count in zip(("train", "val", "test"), counts):
        for idx in order[cursor : cursor + count]:
            split_of[int(idx)] = split
        cursor += count

    entries = []
    for i in range(n_samples):
        sid = f"s{i:04d}"
        sample_seed = mix_seed(seed, "sample", i)
        contrast = "t1" if i % 2 == 0 else "t2"
        n_ell = int(np_rng(sample_seed, "nell").integers(n_ellipsoids_range[0], n_ellipsoids_range[1] + 1))
        spec = PhantomSpec(
            shape=shape, seed=sample_seed, n_ellipsoids=n_ell, contrast_mode=contrast
        )
        hr = generate_phantom(spec)
        mid = degrade_to_field(hr, FieldStrength.F3, k_res=k_res)
        lr = degrade_to_field(hr, lr_field, k_res=k_res)
        guidance = {
            axis: synth_guidance(
                _axis_slice_shape(shape, axis),
                mix_seed(sample_seed, "guidance", _AXIS_KEYS[axis]),
                bias_amp=DATASET_BIAS_AMP,
                warp_max=DATASET_WARP_MAX,
            )
            for axis in Axis
        }
        if corrupt_lr:
            lr = corrupt_volume(lr, guidance)

        files = {"hr": f"samples/{sid}_hr.volb", "lr": f"samples/{sid}_lr.volb", "mid": f"samples/{sid}_mid.volb"}
        try:
            save_volume(out / files["hr"], hr)
            save_volume(out / files["lr"], lr)
            save_volume(out / files["mid"], mid)
            guid_files = {}
            for axis in Axis:
                rel = f"samples/{sid}_guid_{_AXIS_KEYS[axis]}.gdnc"
                save_guidance(out / rel, guidance[axis])
                guid_files[_AXIS_KEYS[axis]] = rel
        except OSError as exc:
            raise IntegrityError(f"failed writing sample {sid} under {out}: {exc}") from exc

        entries.append(
            {
                "id": sid,
                "split": split_of[i],
                "contrast": contrast,
                "seed": sample_seed,
                "n_ellipsoids": n_ell,
                "files": files,
                "guidance": guid_files,
                "fields": {"hr": "7T", "lr": lr_field.label, "mid": "3T"},
            }
        )

    manifest = {
        "version": 1,
        "seed": seed,
        "n_samples": n_samples,
        "shape": list(shape),
        "split_fracs": list(split_fracs),
        "corrupt_lr": corrupt_lr,
        "k_res": k_res,
        "samples": entries,
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


class PhantomDataset:
    """Read access to a persisted dataset directory."""

    def __init__(self, root):
        self.root = Path(root)
        manifest_path = self.root / "manifest.json"
        if not manifest_path.exists():
            raise ConfigurationError(f"no manifest.json under {self.root}")
        with open(manifest_path) as fh:
            self.manifest = json.load(fh)
        self.samples = {e["id"]: e for e in self.manifest["samples"]}
        self._volumes: dict = {}
        self._guidance: dict = {}

    def ids(self, split: str | None = None) -> list[str]:
        return [e["id"] for e in self.manifest["samples"] if split is None or e["split"] == split]

    def volume(self, sid: str, kind: str) -> Volume:
        key = (sid, kind)
        if key not in self._volumes:
            entry = self.samples[sid]
            self._volumes[key] = load_volume(self.root / entry["files"][kind])
        return self._volumes[key]

    def guidance(self, sid: str, axis: Axis) -> GuidancePair:
        key = (sid, axis)
        if key not in self._guidance:
            entry = self.samples[sid]
            self._guidance[key] = load_guidance(self.root / entry["guidance"][_AXIS_KEYS[axis]])
        return self._guidance[key]

    def guidance_all(self, sid: str) -> dict:
        return {axis: self.guidance(sid, axis) for axis in Axis}

    def contrast(self, sid: str) -> str:
        return self.samples[sid]["contrast"]

    def split(self, sid: str) -> str:
        return self.samples[sid]["split"]
