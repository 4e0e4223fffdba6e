"""Command-line entry point.

Subcommands cover the whole workflow: synth -> train -> reconstruct /
score / eval / bench / ablate / sweep. Results a script might consume
go to stdout as ``key=value`` lines; progress and diagnostics go to
stderr. Exit codes: 0 success, 1 usage error (bad flags, unknown
config keys, missing config file), 2 runtime failure.

Set CM_THREADS to cap the numeric backend's thread pool; it must be in
the environment before numpy loads, which is why this module touches
``os.environ`` before its imports.
"""

from __future__ import annotations

import os
import sys

if os.environ.get("CM_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["CM_THREADS"])

import argparse
import logging
import pathlib

import numpy as np

from . import __version__
from . import config as cfgmod
from . import evaluation as ev
from . import inference as inf
from . import training as tr
from .errors import CpcadError
from .network import load_checkpoint
from .pointcloud import load, normalize, save_xyz_text

log = logging.getLogger("cpcad")


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; this tool reserves 2 for
    runtime failures, so usage problems exit 1 instead."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _build_parser() -> _Parser:
    parser = _Parser(prog="cpcad", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"cpcad {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, out_required=True):
        p.add_argument("--config", help="config file (key = value lines)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config value (repeatable)")
        p.add_argument("--seed", type=int, help="override train.seed")
        p.add_argument("--out", required=out_required, help="output directory")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p)

    p = sub.add_parser("train", help="train a model on a dataset")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory")

    p = sub.add_parser("reconstruct", help="project one cloud onto the shape manifold")
    common(p)
    p.add_argument("--model", required=True, help="checkpoint file")
    p.add_argument("--input", required=True, help="point cloud file")
    p.add_argument("--steps", type=int, help="override sampler.steps")

    p = sub.add_parser("score", help="anomaly-score one cloud")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)

    p = sub.add_parser("eval", help="detection AUROC over a dataset")
    common(p)
    p.add_argument("--model", help="checkpoint file (unused with score.method=train_nn)")
    p.add_argument("--data", required=True)

    p = sub.add_parser("bench", help="stage timings, eval counts, FLOPs")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--stub-steps", type=int, default=1000,
                   help="steps for the iterative comparison probe")

    p = sub.add_parser("ablate", help="train and score every loss variant")
    common(p)
    p.add_argument("--data", required=True)

    p = sub.add_parser("sweep", help="reconstruction fidelity vs sampler steps")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--steps", default="1,2,5", help="comma-separated step counts")

    return parser


def _load_config(args) -> cfgmod.Config:
    cfg = cfgmod.default_config()
    if args.config:
        if not pathlib.Path(args.config).is_file():
            print(f"error: config file {args.config!r} not found", file=sys.stderr)
            raise SystemExit(1)
        try:
            cfg = cfgmod.load_file(args.config)
        except CpcadError as err:
            print(f"error: {args.config}: {err}", file=sys.stderr)
            raise SystemExit(1) from None
    try:
        cfgmod.apply_overrides(cfg, args.set)
    except CpcadError as err:
        print(f"error: {err}", file=sys.stderr)
        raise SystemExit(1) from None
    if args.seed is not None:
        cfg.train.seed = args.seed
    return cfg


def _write_run_meta(args, cfg: cfgmod.Config) -> None:
    """A deterministic record of what produced this output directory."""
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"tool = cpcad {__version__}", f"command = {args.command}"]
    for key in ("data", "model", "input", "steps", "repeats", "stub_steps"):
        if getattr(args, key, None) is not None:
            lines.append(f"{key} = {getattr(args, key)}")
    lines.append("")
    lines.append(cfgmod.serialize(cfg).rstrip("\n"))
    (out / "run.meta").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _emit(**kv) -> None:
    for key, value in kv.items():
        if isinstance(value, float):
            print(f"{key}={value:.9e}")
        else:
            print(f"{key}={value}")


def _sampler(cfg: cfgmod.Config, steps: int | None = None) -> inf.SamplerConfig:
    n = steps if steps is not None else cfg.sampler.steps
    return inf.SamplerConfig(
        tau=inf.sampler_taus(n, cfg.schedule.t_max, cfg.sampler.tau_last),
        eps=cfg.schedule.eps,
        use_target_net=cfg.sampler.use_target_net,
    )


def _cmd_synth(args, cfg):
    out = ev.synth_dataset(cfg, args.out)
    _emit(dataset=out, n_train=cfg.synth.n_train,
          n_test=cfg.synth.n_test_clean + cfg.synth.n_test_anom)


def _cmd_train(args, cfg):
    state = tr.train(cfg, args.data, args.out, logger=log)
    mean_loss = state.loss_sum / max(1, state.loss_count)
    _emit(checkpoint=pathlib.Path(args.out) / "checkpoint.cmad",
          metrics=pathlib.Path(args.out) / "metrics.csv",
          steps=state.step, mean_loss=mean_loss)


def _cmd_reconstruct(args, cfg):
    model = load_checkpoint(args.model, expected_latent_dim=cfg.model.latent_dim)
    cloud = normalize(load(args.input))
    rng = ev._per_cloud_rng(cfg.train.seed, args.input)
    recon, stats = inf.sample(model, cloud, _sampler(cfg, args.steps), rng)
    out_path = pathlib.Path(args.out) / "reconstruction.xyz"
    save_xyz_text(recon, out_path)
    _emit(reconstruction=out_path, backbone_evals=stats.backbone_evals,
          encoder_evals=stats.encoder_evals)


def _cmd_score(args, cfg):
    model = load_checkpoint(args.model, expected_latent_dim=cfg.model.latent_dim)
    cloud = normalize(load(args.input))
    rng = ev._per_cloud_rng(cfg.train.seed, args.input)
    report = inf.score(model, cloud, _sampler(cfg), rng,
                       smooth_neighbors=cfg.score.smooth_neighbors,
                       top_fraction=cfg.score.top_fraction)
    out = pathlib.Path(args.out)
    inf.export_heatmap(report, out / "heatmap.csv")
    save_xyz_text(report.reconstruction, out / "reconstruction.xyz")
    _emit(object_score=report.object_score, heatmap=out / "heatmap.csv",
          backbone_evals=report.eval_counts["backbone"],
          encoder_evals=report.eval_counts["encoder"])


def _cmd_eval(args, cfg):
    if cfg.score.method == "train_nn":
        scorer = ev.make_train_nn_scorer(args.data, cfg)
    else:
        if args.model is None:
            raise CpcadError("eval with score.method=recon requires --model")
        model = load_checkpoint(args.model, expected_latent_dim=cfg.model.latent_dim)
        scorer = ev.make_model_scorer(model, cfg)
    csv_path = pathlib.Path(args.out) / "scores.csv"
    result, rows = ev.evaluate(scorer, args.data, out_csv=csv_path)
    _emit(i_auroc=result, n_scored=len(rows), scores=csv_path)


def _cmd_bench(args, cfg):
    model = load_checkpoint(args.model, expected_latent_dim=cfg.model.latent_dim)
    cloud = load(args.input)
    sampler = _sampler(cfg)
    rec = ev.bench(model, cloud, sampler, repeats=args.repeats,
                   smooth_neighbors=cfg.score.smooth_neighbors,
                   top_fraction=cfg.score.top_fraction, seed=cfg.train.seed)
    stub_wall, stub_stats = ev.bench_iterative(
        model, cloud, args.stub_steps, repeats=max(3, args.repeats // 2),
        use_target_net=cfg.sampler.use_target_net, t_max=cfg.schedule.t_max,
        seed=cfg.train.seed)
    few_wall = rec.encode_s + rec.sample_s
    out = pathlib.Path(args.out)
    with open(out / "bench.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("stage,seconds,backbone_evals,encoder_evals,backbone_flops,encoder_flops\n")
        fh.write(f"encode,{rec.encode_s:.9e},0,1,0,{rec.encoder_flops}\n")
        fh.write(f"sample,{rec.sample_s:.9e},{rec.backbone_evals},0,{rec.backbone_flops},0\n")
        fh.write(f"score,{rec.score_s:.9e},0,0,0,0\n")
        fh.write(f"iterative_{args.stub_steps},{stub_wall:.9e},{stub_stats.backbone_evals},"
                 f"{stub_stats.encoder_evals},{stub_stats.backbone_flops},"
                 f"{stub_stats.encoder_flops}\n")
    _emit(encode_ms=rec.encode_s * 1e3, sample_ms=rec.sample_s * 1e3,
          score_ms=rec.score_s * 1e3, peak_bytes=rec.peak_bytes,
          backbone_evals=rec.backbone_evals, encoder_evals=rec.encoder_evals,
          backbone_flops=rec.backbone_flops, encoder_flops=rec.encoder_flops,
          stub_steps=args.stub_steps, stub_ms=stub_wall * 1e3,
          stub_backbone_flops=stub_stats.backbone_flops,
          flop_ratio=stub_stats.backbone_flops / rec.backbone_flops,
          wall_ratio=stub_wall / few_wall)


def _cmd_ablate(args, cfg):
    results = ev.ablate_losses(cfg, args.data, args.out, logger=log)
    out = pathlib.Path(args.out)
    with open(out / "ablation.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("variant,auroc\n")
        for variant, value in results:
            fh.write(f"{variant},{value:.9e}\n")
    _emit(**{f"auroc_{variant}": value for variant, value in results})


def _cmd_sweep(args, cfg):
    try:
        steps_list = [int(s) for s in args.steps.split(",") if s.strip()]
        if not steps_list or any(s < 1 for s in steps_list):
            raise ValueError
    except ValueError:
        print(f"error: --steps must be comma-separated positive ints, got {args.steps!r}",
              file=sys.stderr)
        raise SystemExit(1) from None
    model = load_checkpoint(args.model, expected_latent_dim=cfg.model.latent_dim)
    csv_path = pathlib.Path(args.out) / "sweep.csv"
    results = ev.chamfer_sweep(model, args.data, steps_list, cfg, out_csv=csv_path)
    _emit(**{f"cd_steps_{steps}": cd for steps, cd in results}, sweep=csv_path)


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "reconstruct": _cmd_reconstruct,
    "score": _cmd_score,
    "eval": _cmd_eval,
    "bench": _cmd_bench,
    "ablate": _cmd_ablate,
    "sweep": _cmd_sweep,
}


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(message)s")
    args = _build_parser().parse_args(argv)
    cfg = _load_config(args)
    _write_run_meta(args, cfg)
    np.seterr(over="raise", invalid="raise", divide="raise", under="ignore")
    try:
        _COMMANDS[args.command](args, cfg)
    except (CpcadError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
