"""Synthetic multiclass volumes and label-preserving augmentation.

Each sample holds ``C - 1`` disjoint ellipsoids or cuboids on a background;
the image is a per-class mean intensity plus Gaussian noise and a smooth
quadratic bias field, normalized to zero mean and unit variance.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .diffusion import Volume


@dataclass
class SynthConfig:
    shape: tuple[int, int, int] = (24, 24, 24)
    num_classes: int = 4
    class_means: tuple[float, ...] = (0.0, 1.0, 2.0, 3.0)
    noise_sigma: float = 0.35
    bias_strength: float = 0.3
    radius_range: tuple[int, int] = (3, 6)
    n_train: int = 64
    n_val: int = 16
    n_test: int = 16
    seed: int = 0
    max_tries: int = 200

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if len(self.class_means) != self.num_classes:
            raise ValueError(
                f"class_means has {len(self.class_means)} entries for {self.num_classes} classes")
        lo, hi = self.radius_range
        if lo < 1 or hi < lo or 2 * hi + 1 > min(self.shape):
            raise ValueError(f"radius_range {self.radius_range} does not fit in {self.shape}")


SPLITS = ("train", "val", "test")


def split_indices(cfg: SynthConfig) -> dict[str, range]:
    """Disjoint consecutive index ranges; each index seeds exactly one sample."""
    a, b = cfg.n_train, cfg.n_train + cfg.n_val
    return {"train": range(0, a), "val": range(a, b), "test": range(b, b + cfg.n_test)}


def sample_seed(master: int, index: int) -> int:
    return int(np.random.SeedSequence([master, index]).generate_state(1)[0])


def _structure(rng, shape, radius_range):
    lo, hi = radius_range
    radii = rng.integers(lo, hi + 1, size=3)
    center = [rng.integers(r, n - r) for r, n in zip(radii, shape)]
    grid = np.ogrid[tuple(slice(0, n) for n in shape)]
    if rng.random() < 0.5:
        dist = sum(((g - c) / r) ** 2 for g, c, r in zip(grid, center, radii))
        return dist <= 1.0
    region = np.ones(shape, dtype=bool)
    for g, c, r in zip(grid, center, radii):
        region = region & (np.abs(g - c) <= r)
    return region


def _bias_field(rng, shape, strength):
    coords = np.meshgrid(*[np.linspace(-1, 1, n) for n in shape], indexing="ij")
    lin = rng.uniform(-1, 1, size=3)
    quad = rng.uniform(-1, 1, size=3)
    field_ = sum(a * c + b * c**2 for a, b, c in zip(lin, quad, coords))
    return strength * field_ / 6.0


def generate_sample(cfg: SynthConfig, seed: int) -> tuple[Volume, np.ndarray]:
    """One (image, label mask) pair, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    mask = np.zeros(cfg.shape, dtype=np.uint8)
    for c in range(1, cfg.num_classes):
        for _ in range(cfg.max_tries):
            region = _structure(rng, cfg.shape, cfg.radius_range)
            if not (mask[region] != 0).any():
                mask[region] = c
                break
        else:
            raise ValueError(
                f"could not place structure {c} without overlap after {cfg.max_tries} tries; "
                "use a smaller radius_range or a larger volume")
    means = np.asarray(cfg.class_means, dtype=np.float64)
    image = means[mask] + cfg.noise_sigma * rng.standard_normal(cfg.shape)
    if cfg.bias_strength:
        image = image + _bias_field(rng, cfg.shape, cfg.bias_strength)
    std = image.std()
    image = (image - image.mean()) / (std if std > 0 else 1.0)
    return Volume(image[None].astype(np.float32), (1.0, 1.0, 1.0)), mask


def generate_split(cfg: SynthConfig, split: str) -> list[tuple[int, Volume, np.ndarray]]:
    return [(i, *generate_sample(cfg, sample_seed(cfg.seed, i))) for i in split_indices(cfg)[split]]


# --- augmentation -----------------------------------------------------------

@dataclass
class AugmentParams:
    """A recorded geometric transform: 90-degree rotation, flips, shift."""

    rot_axes: tuple[int, int] = (0, 1)
    rot_k: int = 0
    flips: tuple[bool, bool, bool] = (False, False, False)
    shifts: tuple[int, int, int] = (0, 0, 0)

    @property
    def is_identity(self) -> bool:
        return self.rot_k % 4 == 0 and not any(self.flips) and not any(self.shifts)


def draw_augmentation(rng: np.random.Generator, shape, max_shift: float = 0.2) -> AugmentParams:
    planes = [(a, b) for a, b in ((0, 1), (0, 2), (1, 2)) if shape[a] == shape[b]]
    if planes:
        rot_axes = planes[rng.integers(len(planes))]
        rot_k = int(rng.integers(4))
    else:
        rot_axes, rot_k = (0, 1), 0
    flips = tuple(bool(f) for f in rng.random(3) < 0.5)
    shifts = tuple(int(rng.integers(-int(max_shift * n), int(max_shift * n) + 1)) for n in shape)
    return AugmentParams(rot_axes, rot_k, flips, shifts)


def _shift(arr: np.ndarray, shifts, fill) -> np.ndarray:
    out = np.full_like(arr, fill)
    src, dst = [], []
    for s, n in zip(shifts, arr.shape):
        if abs(s) >= n:
            return out
        src.append(slice(max(0, -s), n - max(0, s)))
        dst.append(slice(max(0, s), n - max(0, -s)))
    out[tuple(dst)] = arr[tuple(src)]
    return out


def apply_augmentation(arr: np.ndarray, params: AugmentParams, fill=0) -> np.ndarray:
    """Apply ``params`` to the trailing three axes of ``arr``."""
    lead = arr.ndim - 3
    out = arr
    if params.rot_k % 4:
        out = np.rot90(out, params.rot_k, axes=(lead + params.rot_axes[0], lead + params.rot_axes[1]))
    for axis, flip in enumerate(params.flips):
        if flip:
            out = np.flip(out, axis=lead + axis)
    out = np.ascontiguousarray(out)
    if any(params.shifts):
        if lead:
            out = np.stack([_shift(a, params.shifts, fill) for a in out])
        else:
            out = _shift(out, params.shifts, fill)
    return out


def augment(image: np.ndarray, mask: np.ndarray, rng: np.random.Generator,
            params: Optional[AugmentParams] = None) -> tuple[np.ndarray, np.ndarray, AugmentParams]:
    """Same random transform on image and mask.

    Shifted-in voxels get label 0 and the sample's mean background intensity.
    """
    if params is None:
        params = draw_augmentation(rng, mask.shape)
    background = mask == 0
    fill = float(image[..., background].mean()) if background.any() else 0.0
    return apply_augmentation(image, params, fill), apply_augmentation(mask, params, 0), params
