"""Few-step reconstruction and anomaly scoring.

Reconstruction: encode the input cloud once, noise it to the highest
level tau_0 and denoise in a single call; each further step re-noises
the running estimate to sqrt(tau_i^2 - eps^2) and denoises again. A
two-step run therefore costs exactly two backbone evaluations and one
encoder evaluation, which the returned stats record (together with the
FLOPs each stage actually executed).

Scoring: the raw per-point score is the squared distance from each
input point to its nearest reconstructed point; scores are smoothed by
averaging over each point's nearest input-space neighbors (the point
itself counts), and the object score is the mean of the top fraction
of smoothed scores.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from . import numerics as nm
from .errors import ContractError
from .pointcloud import NeighborIndex, PointCloud, require_pipeline_size

DEFAULT_TAU_LAST = 0.5


@dataclasses.dataclass(frozen=True)
class SamplerConfig:
    """Denoising schedule for reconstruction: strictly decreasing noise
    levels starting at the training ceiling."""

    tau: tuple
    eps: float = 0.002
    use_target_net: bool = True

    def __post_init__(self):
        tau = tuple(float(t) for t in self.tau)
        if not tau:
            raise ContractError("sampler needs at least one noise level")
        if any(b >= a for a, b in zip(tau, tau[1:])):
            raise ContractError(f"tau must be strictly decreasing, got {tau}")
        if tau[-1] < self.eps:
            raise ContractError(f"tau must stay at or above eps={self.eps}")
        object.__setattr__(self, "tau", tau)

    @property
    def steps(self) -> int:
        return len(self.tau)


def sampler_taus(steps: int, t_max: float = 80.0, tau_last: float = DEFAULT_TAU_LAST):
    """Geometric family of noise levels from t_max down to tau_last.

    steps=1 gives (t_max,); steps=2 gives (t_max, tau_last); more steps
    interpolate geometrically, so the two-step default is always a
    prefix-compatible special case.
    """
    if steps < 1:
        raise ContractError(f"steps must be >= 1, got {steps}")
    if not 0 < tau_last < t_max:
        raise ContractError(f"need 0 < tau_last < t_max, got {tau_last}, {t_max}")
    if steps == 1:
        return (t_max,)
    ratio = (tau_last / t_max) ** (1.0 / (steps - 1))
    return tuple(t_max * ratio ** i for i in range(steps))


@dataclasses.dataclass
class SampleStats:
    backbone_evals: int = 0
    encoder_evals: int = 0
    backbone_flops: int = 0
    encoder_flops: int = 0


@dataclasses.dataclass(frozen=True)
class AnomalyReport:
    """Output of ``score``: smoothed per-point scores aligned with the
    input points, the pooled object score, the reconstruction, and the
    evaluation counts of the run that produced it."""

    points: np.ndarray
    per_point_scores: np.ndarray
    object_score: float
    reconstruction: PointCloud
    eval_counts: dict


def encode_stage(model, pts, use_target_net: bool, stats: SampleStats) -> nm.Tensor:
    """One encoder evaluation, with FLOPs credited to the encoder."""
    which = "target" if use_target_net else "online"
    before = nm.flops_report()
    with nm.frozen():
        c = model.encode(pts, which=which)
    stats.encoder_flops += nm.flops_report() - before
    stats.encoder_evals += 1
    return c


def denoise_stage(model, x, t: float, c, use_target_net: bool,
                  stats: SampleStats) -> np.ndarray:
    """One backbone evaluation, with FLOPs credited to the backbone."""
    which = "target" if use_target_net else "online"
    before = nm.flops_report()
    with nm.frozen():
        y = model.forward(x, t, c, which=which)
    stats.backbone_flops += nm.flops_report() - before
    stats.backbone_evals += 1
    return y.data


def sample_from_latent(model, pts: np.ndarray, c, cfg: SamplerConfig,
                       rng: np.random.Generator, stats: SampleStats) -> np.ndarray:
    """Reconstruction given an already-computed latent."""
    tau = cfg.tau
    x = pts + tau[0] * rng.standard_normal(pts.shape)
    x_hat = denoise_stage(model, x, tau[0], c, cfg.use_target_net, stats)
    for t in tau[1:]:
        sigma = math.sqrt(max(t * t - cfg.eps * cfg.eps, 0.0))
        x = x_hat + sigma * rng.standard_normal(pts.shape)
        x_hat = denoise_stage(model, x, t, c, cfg.use_target_net, stats)
    return x_hat


def sample(model, cloud: PointCloud, cfg: SamplerConfig,
           rng: np.random.Generator) -> tuple[PointCloud, SampleStats]:
    """Project a (normalized) cloud onto the learned clean-shape manifold.

    Runs exactly len(cfg.tau) backbone evaluations and one encoder
    evaluation.
    """
    require_pipeline_size(cloud, "sample")
    stats = SampleStats()
    pts = cloud.points
    c = encode_stage(model, pts, cfg.use_target_net, stats)
    x_hat = sample_from_latent(model, pts, c, cfg, rng, stats)
    recon = PointCloud(x_hat, label=cloud.label, source_id=cloud.source_id)
    return recon, stats


def per_point_scores(input_pts: np.ndarray, recon_pts: np.ndarray,
                     smooth_neighbors: int = 5) -> np.ndarray:
    """Squared NN distance input -> reconstruction, neighborhood-smoothed.

    Each point's raw score is averaged with those of its nearest
    neighbors in the *input* cloud (itself included), which suppresses
    isolated spikes while keeping coherent defect patches hot.
    """
    raw, _ = NeighborIndex(recon_pts).query(input_pts)
    k = min(smooth_neighbors, len(input_pts))
    _, knn = NeighborIndex(input_pts).query_k(input_pts, k)
    return raw[knn].mean(axis=1)


def object_score(scores: np.ndarray, top_fraction: float = 0.01) -> float:
    """Mean of the hottest fraction of per-point scores (at least one)."""
    if not 0 < top_fraction <= 1:
        raise ContractError(f"top_fraction must be in (0, 1], got {top_fraction}")
    m = max(1, int(len(scores) * top_fraction))
    top = np.sort(scores)[-m:]
    return float(top.mean())


def score(model, cloud: PointCloud, cfg: SamplerConfig, rng: np.random.Generator,
          smooth_neighbors: int = 5, top_fraction: float = 0.01,
          reconstruction: PointCloud | None = None) -> AnomalyReport:
    """Reconstruct a cloud and score every point against the result.

    Pass ``reconstruction`` to score against a precomputed cloud (the
    eval counters then report zero evaluations).
    """
    require_pipeline_size(cloud, "score")
    if reconstruction is None:
        reconstruction, stats = sample(model, cloud, cfg, rng)
    else:
        stats = SampleStats()
    scores = per_point_scores(cloud.points, reconstruction.points, smooth_neighbors)
    return AnomalyReport(
        points=cloud.points,
        per_point_scores=scores,
        object_score=object_score(scores, top_fraction),
        reconstruction=reconstruction,
        eval_counts={
            "backbone": stats.backbone_evals,
            "encoder": stats.encoder_evals,
            "backbone_flops": stats.backbone_flops,
            "encoder_flops": stats.encoder_flops,
        },
    )


def export_heatmap(report: AnomalyReport, path) -> None:
    """CSV of x,y,z,score plus a min-max normalized column.

    Coordinates and scores are written with 9 significant digits. A
    constant score column normalizes to all zeros.
    """
    scores = report.per_point_scores
    lo, hi = float(scores.min()), float(scores.max())
    span = hi - lo
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("x,y,z,score,score_norm\n")
        for (x, y, z), s in zip(report.points, scores):
            norm = (s - lo) / span if span > 0 else 0.0
            fh.write(f"{x:.9e},{y:.9e},{z:.9e},{s:.9e},{norm:.9e}\n")


def load_heatmap(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Read back an exported heatmap: (points, scores, normalized)."""
    pts, scores, norms = [], [], []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "x,y,z,score,score_norm":
            raise ContractError(f"unexpected heatmap header {header!r}")
        for line in fh:
            x, y, z, s, n = line.split(",")
            pts.append([float(x), float(y), float(z)])
            scores.append(float(s))
            norms.append(float(n))
    return np.array(pts), np.array(scores), np.array(norms)
