"""Synthetic local surface defects for training and test-set generation.

A pivot point is drawn uniformly, its nearest neighbors form a patch,
and every patch point is pushed along its own unit direction away from
the pivot, modulated elementwise by a single Gaussian draw shared by
the whole patch. Positive scale bulges the surface outward from the
pivot; negative scale produces a concavity.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .errors import ContractError
from .pointcloud import NeighborIndex, PointCloud, _as_points

MODES = ("bulge", "concavity")


@dataclasses.dataclass(frozen=True)
class PatchGenConfig:
    """Knobs for one defect: displacement scale, patch size (a point
    count), the sigma of the shared modulation draw, and the mode."""

    scale: float = 0.05
    patch_size: int = 25
    translation_sigma: float = 1.0
    mode: str = "bulge"

    def __post_init__(self):
        if not np.isfinite(self.scale) or self.scale <= 0:
            raise ContractError(f"scale must be positive, got {self.scale}")
        if self.patch_size < 1:
            raise ContractError(f"patch_size must be >= 1, got {self.patch_size}")
        if self.translation_sigma <= 0:
            raise ContractError("translation_sigma must be positive")
        if self.mode not in MODES:
            raise ContractError(f"mode must be one of {MODES}, got {self.mode!r}")


def patch_size_for(n_points: int, fraction: float) -> int:
    """Resolve a patch fraction to a concrete point count (at least 1)."""
    if not 0 < fraction < 1:
        raise ContractError(f"patch fraction must be in (0, 1), got {fraction}")
    return max(1, round(n_points * fraction))


def displace(points: np.ndarray, pivot: np.ndarray, signed_scale: float,
             modulation: np.ndarray) -> np.ndarray:
    """Push points along their unit offsets from the pivot.

    p <- p + s * normalize(p - pivot) * modulation, elementwise in the
    last factor. Points coincident with the pivot do not move (their
    direction is undefined, so their offset is taken as zero).
    """
    offsets = points - pivot
    norms = np.linalg.norm(offsets, axis=1, keepdims=True)
    units = np.divide(offsets, norms, out=np.zeros_like(offsets), where=norms > 0)
    return points + signed_scale * units * modulation


def perturb(cloud, cfg: PatchGenConfig, rng: np.random.Generator):
    """Apply one patch defect. Returns (perturbed PointCloud, bool mask).

    The mask flags exactly ``patch_size`` points; the pivot itself is
    never part of the patch. Consumes, in order: one pivot draw and one
    3-vector modulation draw from ``rng``.
    """
    pts = _as_points(cloud)
    n = pts.shape[0]
    if cfg.patch_size > n - 1:
        raise ContractError(
            f"patch_size {cfg.patch_size} too large for a {n}-point cloud"
        )
    pivot_idx = int(rng.integers(0, n))
    modulation = rng.normal(0.0, cfg.translation_sigma, size=3)

    # nearest neighbors of the pivot, excluding the pivot itself
    _, knn = NeighborIndex(pts).query_k(pts[pivot_idx:pivot_idx + 1], cfg.patch_size + 1)
    patch_idx = np.asarray([i for i in knn[0] if i != pivot_idx][: cfg.patch_size])

    signed = cfg.scale if cfg.mode == "bulge" else -cfg.scale
    out = np.array(pts)
    out[patch_idx] = displace(pts[patch_idx], pts[pivot_idx], signed, modulation)

    mask = np.zeros(n, dtype=bool)
    mask[patch_idx] = True
    label = cloud.label if isinstance(cloud, PointCloud) else "unknown"
    source = cloud.source_id if isinstance(cloud, PointCloud) else ""
    return PointCloud(out, label=label, point_mask=mask, source_id=source), mask
