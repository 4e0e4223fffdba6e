"""Point cloud type, geometry ops, and the two on-disk formats.

Clouds are (N, 3) float64 arrays. Nearest-neighbor queries go through
``NeighborIndex``, which brute-forces small clouds and uses a k-d tree
above a size cutoff; either path reports squared distances recomputed
directly from coordinates, so results are bitwise identical to a linear
scan regardless of which backend answered.

Formats:
  * xyz text: one point per line, three decimal reals, ``#`` comments.
  * xyz binary: magic ``PCXZ``, little-endian u32 count, then count*3
    little-endian f32 coordinates.
"""

from __future__ import annotations

import dataclasses
import os

import numpy as np
from scipy.spatial import cKDTree

from .errors import ContractError, ParseError

LABELS = ("clean", "anomalous", "unknown")

_BIN_MAGIC = b"PCXZ"
_BRUTE_FORCE_MAX = 256

# Pipeline stages (training, scoring) refuse clouds smaller than this;
# the container itself only requires non-emptiness so that tiny
# geometric fixtures can round-trip through the same code paths.
MIN_PIPELINE_POINTS = 4


@dataclasses.dataclass(frozen=True)
class PointCloud:
    """An (N, 3) cloud with an optional per-point anomaly mask."""

    points: np.ndarray
    label: str = "unknown"
    point_mask: np.ndarray | None = None
    source_id: str = ""

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise ContractError(f"point clouds are (N, 3) with N >= 1, got {pts.shape}")
        if not np.isfinite(pts).all():
            raise ContractError("point cloud has non-finite coordinates")
        if self.label not in LABELS:
            raise ContractError(f"label must be one of {LABELS}, got {self.label!r}")
        if self.point_mask is not None:
            mask = np.asarray(self.point_mask, dtype=bool)
            if mask.shape != (pts.shape[0],):
                raise ContractError("point_mask length must match the point count")
            object.__setattr__(self, "point_mask", mask)
        pts = pts.copy()
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]


def _as_points(cloud) -> np.ndarray:
    if isinstance(cloud, PointCloud):
        return cloud.points
    pts = np.asarray(cloud, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
        raise ContractError(f"expected an (N, 3) array, got {pts.shape}")
    return pts


def require_pipeline_size(cloud, context: str) -> None:
    if len(_as_points(cloud)) < MIN_PIPELINE_POINTS:
        raise ContractError(
            f"{context}: need at least {MIN_PIPELINE_POINTS} points, got {len(_as_points(cloud))}"
        )


def normalize(cloud: PointCloud) -> PointCloud:
    """Center at the centroid and divide by the max absolute coordinate.

    Degenerate clouds (all points identical) map to all zeros rather
    than dividing by zero. Applying normalize twice moves nothing by
    more than ~1e-12.
    """
    pts = _as_points(cloud)
    centered = pts - pts.mean(axis=0)
    extent = np.abs(centered).max()
    if extent == 0.0:
        out = np.zeros_like(centered)
    else:
        out = centered / extent
    if isinstance(cloud, PointCloud):
        return dataclasses.replace(cloud, points=out)
    return PointCloud(out)


def subsample_uniform(cloud: PointCloud, m: int, rng: np.random.Generator) -> PointCloud:
    """Draw m distinct points uniformly without replacement.

    With m equal to the cloud size this is a random permutation. The
    selection is a pure function of the generator state.
    """
    pts = _as_points(cloud)
    n = pts.shape[0]
    if not 1 <= m <= n:
        raise ContractError(f"subsample size {m} outside [1, {n}]")
    idx = rng.choice(n, size=m, replace=False)
    out = pts[idx]
    if isinstance(cloud, PointCloud):
        mask = cloud.point_mask[idx] if cloud.point_mask is not None else None
        return PointCloud(out, label=cloud.label, point_mask=mask, source_id=cloud.source_id)
    return PointCloud(out)


class NeighborIndex:
    """Exact nearest-neighbor queries over a fixed reference cloud.

    Small references are answered by a vectorized linear scan; larger
    ones by a k-d tree. The tree is only trusted for the *index* of the
    neighbor; squared distances are always recomputed from coordinates
    so both backends return identical numbers.
    """

    def __init__(self, points):
        self._pts = _as_points(points)
        self._tree = cKDTree(self._pts) if len(self._pts) > _BRUTE_FORCE_MAX else None

    def __len__(self):
        return len(self._pts)

    def query(self, queries) -> tuple[np.ndarray, np.ndarray]:
        """Nearest neighbor of each query: (squared distances, indices)."""
        sqd, idx = self.query_k(queries, 1)
        return sqd[:, 0], idx[:, 0]

    def query_k(self, queries, k: int) -> tuple[np.ndarray, np.ndarray]:
        """k nearest neighbors per query, nearest first."""
        q = _as_points(queries)
        n = len(self._pts)
        if not 1 <= k <= n:
            raise ContractError(f"k={k} outside [1, {n}]")
        if self._tree is not None:
            _, idx = self._tree.query(q, k=k)
            idx = idx.reshape(len(q), k)
        else:
            full = ((q[:, None, :] - self._pts[None, :, :]) ** 2).sum(axis=2)
            if k == 1:
                idx = np.argmin(full, axis=1).reshape(-1, 1)
            else:
                part = np.argpartition(full, k - 1, axis=1)[:, :k]
                order = np.argsort(np.take_along_axis(full, part, axis=1), axis=1, kind="stable")
                idx = np.take_along_axis(part, order, axis=1)
        sqd = ((q[:, None, :] - self._pts[idx]) ** 2).sum(axis=2)
        return sqd, idx


def chamfer(a, b) -> float:
    """Symmetric squared-distance Chamfer divergence.

    Mean over A of the squared distance to the nearest point of B, plus
    the same with the roles swapped. Identical clouds score 0; a pair of
    single points at unit distance scores 2.
    """
    pa, pb = _as_points(a), _as_points(b)
    d_ab, _ = NeighborIndex(pb).query(pa)
    d_ba, _ = NeighborIndex(pa).query(pb)
    return float(np.mean(d_ab) + np.mean(d_ba))


# ---------------------------------------------------------------------------
# file formats


def save_xyz_text(cloud, path) -> None:
    pts = _as_points(cloud)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for x, y, z in pts:
            fh.write(f"{x:.17g} {y:.17g} {z:.17g}\n")


def load_xyz_text(path, label: str = "unknown") -> PointCloud:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            parts = body.split()
            if len(parts) != 3:
                raise ParseError(
                    f"expected 3 coordinates, found {len(parts)}", line=lineno
                )
            try:
                rows.append([float(p) for p in parts])
            except ValueError:
                raise ParseError(f"unparseable coordinate in {parts!r}", line=lineno) from None
    if not rows:
        raise ParseError(f"no points in {os.fspath(path)!r}")
    return PointCloud(np.array(rows), label=label, source_id=os.fspath(path))


def save_xyz_bin(cloud, path) -> None:
    """Binary format; coordinates are stored in single precision."""
    pts = _as_points(cloud)
    with open(path, "wb") as fh:
        fh.write(_BIN_MAGIC)
        fh.write(np.uint32(pts.shape[0]).tobytes())
        fh.write(pts.astype("<f4").tobytes())


def load_xyz_bin(path, label: str = "unknown") -> PointCloud:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _BIN_MAGIC:
        raise ParseError(f"bad magic in {os.fspath(path)!r}", offset=0)
    if len(blob) < 8:
        raise ParseError("truncated header", offset=len(blob))
    count = int(np.frombuffer(blob[4:8], dtype="<u4")[0])
    expected = 8 + 12 * count
    if len(blob) != expected:
        raise ParseError(
            f"payload length {len(blob)} != {expected} for {count} points", offset=8
        )
    if count == 0:
        raise ParseError("empty cloud", offset=4)
    pts = np.frombuffer(blob[8:], dtype="<f4").astype(np.float64).reshape(count, 3)
    return PointCloud(pts, label=label, source_id=os.fspath(path))


def save(cloud, path) -> None:
    """Dispatch on extension: .xyz is text, anything else is binary."""
    if str(path).endswith(".xyz"):
        save_xyz_text(cloud, path)
    else:
        save_xyz_bin(cloud, path)


def load(path, label: str = "unknown") -> PointCloud:
    if str(path).endswith(".xyz"):
        return load_xyz_text(path, label=label)
    return load_xyz_bin(path, label=label)
