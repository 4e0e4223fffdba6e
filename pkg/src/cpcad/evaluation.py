"""Dataset synthesis, detection metrics, efficiency benchmarks, and the
loss ablation harness.

Dataset layout written by ``synth_dataset`` and consumed everywhere
else::

    <dir>/manifest.csv     # '# seed=<n>' comment, then file,label rows
    <dir>/train/*.xyzb     # clean training clouds
    <dir>/test/*.xyzb      # held-out clean and defective clouds
    <dir>/test/*.mask      # 0/1 per-point flags for defective clouds
    <dir>/refs/*.xyzb      # pre-defect geometry of the defective clouds

Evaluation is scorer-agnostic: ``evaluate`` takes any callable mapping
a labeled cloud to a real score, so oracle and stub scorers exercise
the same plumbing as a trained model.
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
import pathlib
import time
import tracemalloc

import numpy as np

from .config import Config
from .errors import ContractError, ParseError
from .inference import SamplerConfig, SampleStats, denoise_stage, encode_stage, \
    object_score, per_point_scores, sample, sample_from_latent, score, sampler_taus
from .patchgen import PatchGenConfig, patch_size_for, perturb
from .pointcloud import PointCloud, chamfer, load, normalize, save_xyz_bin
from .schedule import KarrasSchedule, timesteps
from .training import load_training_clouds


@dataclasses.dataclass(frozen=True)
class LabeledScore:
    score: float
    label: int

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ContractError("scores must be finite")
        if self.label not in (0, 1):
            raise ContractError(f"labels are 0 or 1, got {self.label}")


def auroc(samples) -> float:
    """Area under the ROC curve by the rank statistic.

    Mid-ranks handle ties, so a tied positive/negative pair counts one
    half. This matches brute-force pair counting exactly (rank sums of
    half-integers are exact in binary floating point).
    """
    samples = list(samples)
    scores = np.array([s.score for s in samples])
    labels = np.array([s.label for s in samples])
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ContractError("auroc needs at least one positive and one negative")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    i = 0
    rank = 1.0
    while i < len(scores):
        j = i
        while j < len(scores) and sorted_scores[j] == sorted_scores[i]:
            j += 1
        mid = (rank + rank + (j - i) - 1) / 2.0
        ranks[order[i:j]] = mid
        rank += j - i
        i = j
    pos_rank_sum = ranks[labels == 1].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


# ---------------------------------------------------------------------------
# synthetic shapes


def _unit_sphere(rng, n, jitter):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    radii = 1.0 + jitter * rng.uniform(-1.0, 1.0, size=(n, 1))
    return v * radii


def _cube_surface(rng, n, jitter):
    face = rng.integers(0, 6, size=n)
    uv = rng.uniform(-1.0, 1.0, size=(n, 2))
    pts = np.empty((n, 3))
    axis = face % 3
    sign = np.where(face < 3, 1.0, -1.0)
    for i in range(n):
        rest = [j for j in range(3) if j != axis[i]]
        pts[i, axis[i]] = sign[i]
        pts[i, rest[0]], pts[i, rest[1]] = uv[i]
    normal_jitter = jitter * rng.uniform(-1.0, 1.0, size=n)
    pts[np.arange(n), axis] += sign * normal_jitter
    return pts


def _cylinder_surface(rng, n, jitter):
    # radius 1, z in [-1, 1]; areas: side 4*pi, each cap pi
    pts = np.empty((n, 3))
    u = rng.uniform(0.0, 6.0, size=n)  # proportional to area 4pi:pi:pi
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    side = u < 4.0
    r_jit = 1.0 + jitter * rng.uniform(-1.0, 1.0, size=n)
    pts[side, 0] = np.cos(theta[side]) * r_jit[side]
    pts[side, 1] = np.sin(theta[side]) * r_jit[side]
    pts[side, 2] = rng.uniform(-1.0, 1.0, size=side.sum())
    caps = ~side
    r = np.sqrt(rng.uniform(0.0, 1.0, size=caps.sum()))
    pts[caps, 0] = r * np.cos(theta[caps])
    pts[caps, 1] = r * np.sin(theta[caps])
    pts[caps, 2] = np.where(u[caps] < 5.0, 1.0, -1.0) + jitter * rng.uniform(
        -1.0, 1.0, size=caps.sum())
    return pts


_SHAPES = {"sphere": _unit_sphere, "cube": _cube_surface, "cylinder": _cylinder_surface}


def make_shape(shape: str, n: int, jitter: float, rng) -> PointCloud:
    if shape not in _SHAPES:
        raise ContractError(f"unknown shape {shape!r}; options: {sorted(_SHAPES)}")
    return normalize(PointCloud(_SHAPES[shape](rng, n, jitter), label="clean"))


def synth_dataset(cfg: Config, out_dir, seed: int | None = None) -> pathlib.Path:
    """Generate a dataset tree from the ``synth.*`` config section.

    Training clouds are clean; test clouds are half clean, half carrying
    one defect each (planted with the ``synth.anomaly_*`` parameters,
    which are intentionally separate from the training-time ``patchgen``
    settings). Byte-identical for identical config and seed.
    """
    sy = cfg.synth
    seed = cfg.train.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    out = pathlib.Path(out_dir)
    for sub in ("train", "test", "refs"):
        (out / sub).mkdir(parents=True, exist_ok=True)

    rows = []
    for i in range(sy.n_train):
        save_xyz_bin(make_shape(sy.shape, sy.points, sy.jitter, rng),
                     out / "train" / f"{i:03d}.xyzb")
    for i in range(sy.n_test_clean):
        cloud = make_shape(sy.shape, sy.points, sy.jitter, rng)
        name = f"clean_{i:03d}.xyzb"
        save_xyz_bin(cloud, out / "test" / name)
        rows.append((f"test/{name}", 0))
    pcfg = PatchGenConfig(
        scale=sy.anomaly_scale,
        patch_size=patch_size_for(sy.points, sy.anomaly_patch_fraction),
        translation_sigma=sy.anomaly_sigma,
        mode=sy.anomaly_mode,
    )
    for i in range(sy.n_test_anom):
        clean = make_shape(sy.shape, sy.points, sy.jitter, rng)
        name = f"anom_{i:03d}.xyzb"
        save_xyz_bin(clean, out / "refs" / name)
        defective, mask = perturb(clean, pcfg, rng)
        save_xyz_bin(defective, out / "test" / name)
        (out / "test" / f"anom_{i:03d}.mask").write_text(
            "".join(f"{int(m)}\n" for m in mask), encoding="utf-8")
        rows.append((f"test/{name}", 1))

    with open(out / "manifest.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# seed={seed}\n")
        fh.write("file,label\n")
        for path, label in rows:
            fh.write(f"{path},{label}\n")
    return out


def read_manifest(dataset_dir) -> list[tuple[str, int]]:
    path = pathlib.Path(dataset_dir) / "manifest.csv"
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            body = line.split("#", 1)[0].strip()
            if not body or body == "file,label":
                continue
            parts = body.split(",")
            if len(parts) != 2 or parts[1] not in ("0", "1"):
                raise ParseError(f"bad manifest row {body!r}", line=lineno)
            rows.append((parts[0], int(parts[1])))
    if not rows:
        raise ParseError(f"manifest {path} lists no test files")
    return rows


def load_test_cloud(dataset_dir, rel_path: str, label: int) -> PointCloud:
    cloud = load(pathlib.Path(dataset_dir) / rel_path,
                 label="anomalous" if label else "clean")
    return dataclasses.replace(cloud, source_id=rel_path)


def _per_cloud_rng(seed: int, name: str) -> np.random.Generator:
    """A generator tied to the cloud's name, not its manifest position,
    so per-cloud results do not depend on evaluation order."""
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def make_model_scorer(model, cfg: Config, seed: int | None = None):
    """The production scorer: normalize, reconstruct, score."""
    seed = cfg.train.seed if seed is None else seed
    sampler = SamplerConfig(
        tau=sampler_taus(cfg.sampler.steps, cfg.schedule.t_max, cfg.sampler.tau_last),
        eps=cfg.schedule.eps,
        use_target_net=cfg.sampler.use_target_net,
    )

    def scorer(cloud: PointCloud) -> float:
        rng = _per_cloud_rng(seed, cloud.source_id)
        report = score(model, normalize(cloud), sampler, rng,
                       smooth_neighbors=cfg.score.smooth_neighbors,
                       top_fraction=cfg.score.top_fraction)
        return report.object_score

    return scorer


def make_train_nn_scorer(dataset_dir, cfg: Config):
    """Model-free baseline: distance into the pooled training clouds.

    Selected with ``score.method = train_nn``. A test point's raw score
    is its squared nearest-neighbor distance to the union of all
    (normalized) training points; smoothing and top-fraction pooling
    match the reconstruction scorer so the two are directly comparable.
    """
    ref = np.concatenate([c.points for c in load_training_clouds(dataset_dir)])

    def scorer(cloud: PointCloud) -> float:
        pts = normalize(cloud).points
        scores = per_point_scores(pts, ref, cfg.score.smooth_neighbors)
        return object_score(scores, cfg.score.top_fraction)

    return scorer


def evaluate(scorer, dataset_dir, out_csv=None) -> tuple[float, list]:
    """Score every manifest row and compute the detection AUROC.

    ``scorer`` is any callable PointCloud -> float. Returns the AUROC
    and the (file, label, score) rows; optionally writes them as CSV.
    """
    rows = []
    for rel_path, label in read_manifest(dataset_dir):
        cloud = load_test_cloud(dataset_dir, rel_path, label)
        rows.append((rel_path, label, float(scorer(cloud))))
    result = auroc(LabeledScore(score=s, label=lbl) for _, lbl, s in rows)
    if out_csv is not None:
        with open(out_csv, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("file,label,object_score\n")
            for rel_path, label, s in rows:
                fh.write(f"{rel_path},{label},{s:.9e}\n")
    return result, rows


def chamfer_sweep(model, dataset_dir, steps_list, cfg: Config,
                  seed: int | None = None, out_csv=None) -> list[tuple[int, float]]:
    """Mean reconstruction fidelity against clean references vs step count.

    For defective test clouds the reference is the stored pre-defect
    geometry; clean clouds are their own reference.
    """
    seed = cfg.train.seed if seed is None else seed
    dataset_dir = pathlib.Path(dataset_dir)
    results = []
    for steps in steps_list:
        sampler = SamplerConfig(
            tau=sampler_taus(steps, cfg.schedule.t_max, cfg.sampler.tau_last),
            eps=cfg.schedule.eps,
            use_target_net=cfg.sampler.use_target_net,
        )
        cds = []
        for rel_path, label in read_manifest(dataset_dir):
            cloud = normalize(load_test_cloud(dataset_dir, rel_path, label))
            ref_path = dataset_dir / "refs" / pathlib.Path(rel_path).name
            reference = normalize(load(ref_path)) if ref_path.exists() else cloud
            rng = _per_cloud_rng(seed, f"{steps}:{rel_path}")
            recon, _ = sample(model, cloud, sampler, rng)
            cds.append(chamfer(recon, reference))
        results.append((steps, float(np.mean(cds))))
    if out_csv is not None:
        with open(out_csv, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("steps,mean_chamfer\n")
            for steps, cd in results:
                fh.write(f"{steps},{cd:.9e}\n")
    return results


# ---------------------------------------------------------------------------
# efficiency


@dataclasses.dataclass
class BenchRecord:
    """Median wall-clock per stage plus exact evaluation accounting."""

    encode_s: float
    sample_s: float
    score_s: float
    peak_bytes: int
    backbone_evals: int
    encoder_evals: int
    backbone_flops: int
    encoder_flops: int


def _median_timing(fn, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    if repeats >= 4:
        times = times[1:]  # drop the warmup run
    return float(np.median(times))


def bench(model, cloud: PointCloud, sampler: SamplerConfig, repeats: int = 5,
          smooth_neighbors: int = 5, top_fraction: float = 0.01,
          seed: int = 0) -> BenchRecord:
    """Time the encode / sample / score stages separately.

    Evaluation counts and FLOPs come from one instrumented pass; wall
    clock is the median over ``repeats`` runs (first run dropped as
    warmup when there are enough repeats).
    """
    if repeats < 3:
        raise ContractError(f"bench needs at least 3 repeats, got {repeats}")
    cloud = normalize(cloud)
    pts = cloud.points

    stats = SampleStats()
    c = encode_stage(model, pts, sampler.use_target_net, stats)
    recon_pts = sample_from_latent(model, pts, c, sampler,
                                   np.random.default_rng(seed), stats)

    encode_s = _median_timing(
        lambda: encode_stage(model, pts, sampler.use_target_net, SampleStats()), repeats)
    sample_s = _median_timing(
        lambda: sample_from_latent(model, pts, c, sampler,
                                   np.random.default_rng(seed), SampleStats()), repeats)
    score_s = _median_timing(
        lambda: per_point_scores(pts, recon_pts, smooth_neighbors), repeats)

    tracemalloc.start()
    report = score(model, cloud, sampler, np.random.default_rng(seed),
                   smooth_neighbors=smooth_neighbors, top_fraction=top_fraction)
    _, peak = tracemalloc.get_traced_memory()
    tracemalloc.stop()
    assert report.eval_counts["backbone"] == stats.backbone_evals

    return BenchRecord(
        encode_s=encode_s, sample_s=sample_s, score_s=score_s, peak_bytes=int(peak),
        backbone_evals=stats.backbone_evals, encoder_evals=stats.encoder_evals,
        backbone_flops=stats.backbone_flops, encoder_flops=stats.encoder_flops,
    )


def iterative_probe(model, cloud: PointCloud, n_steps: int,
                    rng: np.random.Generator, use_target_net: bool = True,
                    t_max: float = 80.0) -> tuple[PointCloud, SampleStats]:
    """Many-step probability-flow Euler reconstruction.

    A deliberately slow baseline: walk the full noise grid from t_max
    down, one backbone evaluation per level, using the same network as
    the few-step sampler so per-evaluation cost is identical.
    """
    if n_steps < 2:
        raise ContractError(f"iterative probe needs >= 2 steps, got {n_steps}")
    stats = SampleStats()
    pts = cloud.points
    grid = timesteps(KarrasSchedule(eps=model.eps, t_max=t_max, rho=7.0, n=n_steps))[::-1]
    c = encode_stage(model, pts, use_target_net, stats)
    x = pts + grid[0] * rng.standard_normal(pts.shape)
    for i, t in enumerate(grid):
        denoised = denoise_stage(model, x, float(t), c, use_target_net, stats)
        if i + 1 < len(grid):
            x = x + (x - denoised) / t * (grid[i + 1] - t)
        else:
            x = denoised
    return PointCloud(x, label=cloud.label, source_id=cloud.source_id), stats


def bench_iterative(model, cloud: PointCloud, n_steps: int, repeats: int = 3,
                    use_target_net: bool = True, t_max: float = 80.0,
                    seed: int = 0) -> tuple[float, SampleStats]:
    """Median wall clock and accounting for the iterative baseline."""
    cloud = normalize(cloud)
    _, stats = iterative_probe(model, cloud, n_steps, np.random.default_rng(seed),
                               use_target_net, t_max)
    wall = _median_timing(
        lambda: iterative_probe(model, cloud, n_steps, np.random.default_rng(seed),
                                use_target_net, t_max), repeats)
    return wall, stats


# ---------------------------------------------------------------------------
# ablation


def ablate_losses(cfg: Config, dataset_dir, work_dir,
                  logger=None) -> list[tuple[str, float]]:
    """Train and evaluate each loss variant under one seed and budget."""
    from .training import train

    work = pathlib.Path(work_dir)
    results = []
    for variant in ("hybrid", "ct_online", "ct_target"):
        run_cfg = dataclasses.replace(cfg)
        run_cfg.train = dataclasses.replace(cfg.train, loss_variant=variant)
        if logger:
            logger.info("ablation: training %s (%d steps)", variant, run_cfg.train.steps)
        state = train(run_cfg, dataset_dir, work / variant, logger=logger)
        result, _ = evaluate(make_model_scorer(state.model, run_cfg), dataset_dir)
        results.append((variant, result))
        if logger:
            logger.info("ablation: %s auroc %.4f", variant, result)
    return results
