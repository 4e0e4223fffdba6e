"""Metric, dataset, and harness tests."""

import numpy as np
import pytest

from cpcad import evaluation as ev
from cpcad.config import default_config
from cpcad.errors import ContractError
from cpcad.inference import SamplerConfig, sampler_taus
from cpcad.network import ConsistencyModel


def ls(scores, labels):
    return [ev.LabeledScore(score=s, label=l) for s, l in zip(scores, labels)]


def test_auroc_worked_example():
    assert ev.auroc(ls([0.9, 0.8, 0.1, 0.3], [1, 0, 0, 1])) == 0.75


def test_auroc_perfect_and_inverted():
    assert ev.auroc(ls([1, 2, 3, 10, 11], [0, 0, 0, 1, 1])) == 1.0
    assert ev.auroc(ls([1, 2, 3, 10, 11], [1, 1, 1, 0, 0])) == 0.0


def test_auroc_all_tied_is_half():
    assert ev.auroc(ls([5.0] * 10, [0, 1] * 5)) == 0.5


def test_auroc_matches_pair_counting_bitwise():
    rng = np.random.default_rng(0)
    for _ in range(25):
        n = int(rng.integers(4, 60))
        scores = np.round(rng.normal(size=n), 1)  # induce ties
        labels = rng.integers(0, 2, size=n)
        if labels.sum() in (0, n):
            labels[0] = 1 - labels[0]
        pos = scores[labels == 1]
        neg = scores[labels == 0]
        wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
        brute = float(wins / (len(pos) * len(neg)))
        assert ev.auroc(ls(scores, labels)) == brute


def test_auroc_monotone_transform_invariant():
    rng = np.random.default_rng(1)
    scores = rng.normal(size=50)
    labels = rng.integers(0, 2, size=50)
    labels[0], labels[1] = 0, 1
    a = ev.auroc(ls(scores, labels))
    b = ev.auroc(ls(np.exp(scores), labels))
    assert a == b


def test_auroc_random_scores_near_half():
    rng = np.random.default_rng(2)
    scores = rng.uniform(size=1000)
    labels = np.array([0, 1] * 500)
    assert 0.45 < ev.auroc(ls(scores, labels)) < 0.55


def test_auroc_validation():
    with pytest.raises(ContractError):
        ev.auroc(ls([1.0, 2.0], [1, 1]))
    with pytest.raises(ContractError):
        ev.LabeledScore(score=np.nan, label=0)
    with pytest.raises(ContractError):
        ev.LabeledScore(score=0.0, label=2)


def small_synth_cfg(shape="sphere"):
    cfg = default_config()
    cfg.synth.shape = shape
    cfg.synth.n_train = 3
    cfg.synth.n_test_clean = 3
    cfg.synth.n_test_anom = 3
    cfg.synth.points = 120
    return cfg


def test_synth_dataset_layout_and_determinism(tmp_path):
    cfg = small_synth_cfg()
    a = ev.synth_dataset(cfg, tmp_path / "a", seed=7)
    ev.synth_dataset(small_synth_cfg(), tmp_path / "b", seed=7)
    files_a = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert files_a == files_b
    for rel in files_a:
        assert (a / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    rows = ev.read_manifest(a)
    assert len(rows) == 6
    assert sum(lbl for _, lbl in rows) == 3
    assert len(list((a / "train").glob("*.xyzb"))) == 3
    assert len(list((a / "refs").glob("*.xyzb"))) == 3
    assert len(list((a / "test").glob("*.mask"))) == 3


def test_synth_shapes_are_normalized(tmp_path):
    rng = np.random.default_rng(3)
    for shape in ("sphere", "cube", "cylinder"):
        cloud = ev.make_shape(shape, 200, 0.02, rng)
        assert np.abs(cloud.points).max() <= 1.0 + 1e-12
        assert np.abs(cloud.points.mean(axis=0)).max() < 1e-12


def test_synth_masks_match_defects(tmp_path):
    cfg = small_synth_cfg()
    out = ev.synth_dataset(cfg, tmp_path / "d", seed=5)
    from cpcad.pointcloud import load

    for i in range(3):
        defective = load(out / "test" / f"anom_{i:03d}.xyzb")
        reference = load(out / "refs" / f"anom_{i:03d}.xyzb")
        mask = np.array([c == "1" for c in
                         (out / "test" / f"anom_{i:03d}.mask").read_text().split()])
        assert mask.sum() == round(120 * cfg.synth.anomaly_patch_fraction)
        # binary storage quantizes both files the same way, so the
        # untouched points agree exactly and the patch differs
        np.testing.assert_array_equal(defective.points[~mask], reference.points[~mask])
        assert (defective.points[mask] != reference.points[mask]).any()


def test_evaluate_with_oracle_and_stub_scorers(tmp_path):
    out = ev.synth_dataset(small_synth_cfg(), tmp_path / "d", seed=9)

    oracle, rows = ev.evaluate(lambda c: 1.0 if c.label == "anomalous" else 0.0, out)
    assert oracle == 1.0
    assert len(rows) == 6

    constant, _ = ev.evaluate(lambda c: 0.0, out)
    assert constant == 0.5  # all tied

    inverted, _ = ev.evaluate(lambda c: -1.0 if c.label == "anomalous" else 0.0, out)
    assert inverted == 0.0


def test_evaluate_order_invariant(tmp_path):
    out = ev.synth_dataset(small_synth_cfg(), tmp_path / "d", seed=11)
    manifest = (out / "manifest.csv").read_text().splitlines()
    header, rows = manifest[:2], manifest[2:]
    (out / "manifest.csv").write_text("\n".join(header + rows[::-1]) + "\n")

    calls = []

    def scorer(cloud):
        calls.append(cloud.source_id)
        rng = ev._per_cloud_rng(1, cloud.source_id)
        return float(rng.uniform())

    reversed_auroc, reversed_rows = ev.evaluate(scorer, out)
    (out / "manifest.csv").write_text("\n".join(header + rows) + "\n")
    forward_auroc, forward_rows = ev.evaluate(scorer, out)
    assert reversed_auroc == forward_auroc
    assert sorted(forward_rows) == sorted(reversed_rows)


def test_evaluate_writes_csv(tmp_path):
    out = ev.synth_dataset(small_synth_cfg(), tmp_path / "d", seed=13)
    csv_path = tmp_path / "scores.csv"
    ev.evaluate(lambda c: 0.25, out, out_csv=csv_path)
    lines = csv_path.read_text().splitlines()
    assert lines[0] == "file,label,object_score"
    assert len(lines) == 7


def test_model_scorer_runs_end_to_end(tmp_path):
    cfg = small_synth_cfg()
    cfg.model.latent_dim = 8
    out = ev.synth_dataset(cfg, tmp_path / "d", seed=15)
    model = ConsistencyModel(latent_dim=8, seed=0)
    result, rows = ev.evaluate(ev.make_model_scorer(model, cfg), out)
    assert 0.0 <= result <= 1.0
    assert all(np.isfinite(s) for _, _, s in rows)


def test_train_nn_scorer_flags_displaced_patch(tmp_path):
    from cpcad.pointcloud import PointCloud

    cfg = small_synth_cfg()
    out = ev.synth_dataset(cfg, tmp_path / "d", seed=21)
    scorer = ev.make_train_nn_scorer(out, cfg)

    rng = np.random.default_rng(3)
    pts = rng.normal(size=(200, 3))
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    clean = scorer(PointCloud(pts, label="clean", source_id="c"))

    bumped = pts.copy()
    bumped[:20] *= 1.6  # push one patch well off the shape
    defective = scorer(PointCloud(bumped, label="anomalous", source_id="a"))
    assert defective > clean > 0.0


def test_train_nn_scorer_is_deterministic(tmp_path):
    cfg = small_synth_cfg()
    out = ev.synth_dataset(cfg, tmp_path / "d", seed=23)
    a, rows_a = ev.evaluate(ev.make_train_nn_scorer(out, cfg), out)
    b, rows_b = ev.evaluate(ev.make_train_nn_scorer(out, cfg), out)
    assert a == b
    assert rows_a == rows_b


def test_bench_counts_and_stub_ratio(tmp_path):
    model = ConsistencyModel(latent_dim=8, seed=1)
    rng = np.random.default_rng(4)
    v = rng.normal(size=(100, 3))
    from cpcad.pointcloud import PointCloud

    cloud = PointCloud(v / np.linalg.norm(v, axis=1, keepdims=True))
    sampler = SamplerConfig(tau=sampler_taus(2))
    rec = ev.bench(model, cloud, sampler, repeats=3)
    assert rec.backbone_evals == 2
    assert rec.encoder_evals == 1
    assert rec.peak_bytes > 0
    assert rec.encode_s > 0 and rec.sample_s > 0 and rec.score_s > 0

    _, stub_stats = ev.bench_iterative(model, cloud, n_steps=10, repeats=3)
    assert stub_stats.backbone_evals == 10
    assert stub_stats.encoder_evals == 1
    # same network, same input size: per-evaluation FLOPs are identical
    assert stub_stats.backbone_flops * 2 == rec.backbone_flops * 10


def test_iterative_probe_validation():
    model = ConsistencyModel(latent_dim=8, seed=1)
    from cpcad.pointcloud import PointCloud

    cloud = PointCloud(np.eye(3, 3) + np.ones((3, 3)))
    with pytest.raises(ContractError):
        ev.iterative_probe(model, cloud, 1, np.random.default_rng(0))
