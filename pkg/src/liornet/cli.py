"""Command-line driver: synth, project, pseudolabel, filter, train, infer, eval, bench.

Global options come before the subcommand. Any ``--section.key=value``
argument (anywhere on the line) overrides the configuration.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import baselines, evaluation, postprocess, pseudolabel, rangeproj, synthgen
from .config import Config, ConfigError
from .core import read_labels, read_scan, write_labels, write_provenance, write_scan
from .nnet import train as T

CONFIG_ECHO = "config.ini"

# short flags that map onto config keys
ALIASES = {
    "--pp-limit-m": "postprocess.limit_m",
    "--pp-ground-margin-m": "postprocess.ground_margin_m",
    "--pp-threshold": "postprocess.threshold",
    "--epochs": "train.epochs",
    "--seed": "train.seed",
}


class StageError(RuntimeError):
    def __init__(self, stage, msg):
        super().__init__(f"{stage}: {msg}")
        self.stage = stage


def split_overrides(argv):
    """Separate ``--section.key=value`` (and alias) arguments from the rest."""
    rest, overrides = [], []
    it = iter(argv)
    for arg in it:
        name, eq, value = arg.partition("=")
        if name in ALIASES:
            if not eq:
                value = next(it, "")
            overrides.append(f"{ALIASES[name]}={value}")
        elif arg.startswith("--") and "." in name and eq:
            overrides.append(arg[2:])
        else:
            rest.append(arg)
    return rest, overrides


def _scans(paths, cfg):
    meta = cfg.sensor()
    fmt = cfg.get("io", "scan_format")
    return [read_scan(p, fmt, meta) for p in paths]


def _outdir(path, cfg) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_ECHO).write_text(cfg.dump())
    return out


def cmd_synth(args, cfg):
    meta = cfg.sensor()
    params = synthgen.SceneParams(
        meta=meta,
        snow_count=cfg.getint("synth", "snow_count"),
        separable=cfg.getbool("synth", "separable"),
        overlap_frac=cfg.getfloat("synth", "overlap_frac"),
        dropout=cfg.getfloat("synth", "dropout"),
        range_noise_m=cfg.getfloat("synth", "range_noise_m"),
        pseudolabel=cfg.pseudolabel(),
    )
    out = _outdir(args.out, cfg)
    first = cfg.getint("synth", "first_seed")
    for k in range(cfg.getint("synth", "count")):
        cloud = synthgen.generate_scene(replace(params, seed=first + k))
        stem = out / f"scene_{first + k:06d}"
        write_scan(cloud, stem.with_suffix(".bin"), cfg.get("io", "scan_format"))
        write_labels(cloud.gt_labels, stem.with_suffix(".label"))
        print(f"{stem.with_suffix('.bin')}\t{len(cloud)} points\t{int(cloud.gt_labels.sum())} snow")


def cmd_project(args, cfg):
    out = _outdir(args.out, cfg)
    for path, cloud in zip(args.scans, _scans(args.scans, cfg)):
        img = rangeproj.project(cloud)
        dest = out / (Path(path).stem + ".rimg")
        rangeproj.write_image_blob(img, dest)
        print(f"{dest}\t{img.height}x{img.width}\t{int(img.valid.sum())} pixels\t{len(img.overflow)} overflow")


def cmd_pseudolabel(args, cfg):
    pl = cfg.pseudolabel()
    out = _outdir(args.out, cfg)
    for path, cloud in zip(args.scans, _scans(args.scans, cfg)):
        labels = pseudolabel.generate(cloud, pl)
        stem = out / Path(path).stem
        write_labels(labels.labels, stem.with_suffix(".label"))
        write_provenance(labels.provenance, stem.with_suffix(".prov"))
        print(f"{stem.with_suffix('.label')}\t{int(labels.labels.sum())} snow / {len(labels.labels)}")


def cmd_filter(args, cfg):
    fc = cfg.filters()
    out = _outdir(args.out, cfg)
    scans = _scans(args.scans, cfg)
    if args.name == "dlior":
        results = list(baselines.dlior(scans, fc.lior, fc.dlior))
    else:
        results = [baselines.run_filter(args.name, c, fc) for c in scans]
    for path, labels in zip(args.scans, results):
        stem = out / Path(path).stem
        write_labels(labels.labels, stem.with_suffix(".label"))
        print(f"{stem.with_suffix('.label')}\t{int(labels.labels.sum())} snow / {len(labels.labels)}")


def cmd_train(args, cfg):
    loss_cfg = cfg.loss()
    train_cfg = cfg.train()
    net_cfg = cfg.net()
    scans = _scans(args.scans, cfg)
    samples = [T.prepare_sample(c, loss_cfg.pseudolabel, loss_cfg.sparsity_k) for c in scans]
    state = T.TrainState.create(net_cfg, seed=train_cfg.seed)
    out = _outdir(args.out, cfg)
    rows = T.train(state, samples, loss_cfg, train_cfg,
                   log=lambda r: print(f"epoch {r['epoch']}\ttotal {r['total']:.6f}", flush=True))
    (out / "loss.tsv").write_text(T.format_log(rows))
    T.save_checkpoint(state, out / "model.ckpt")
    print(f"{out / 'model.ckpt'}\t{state.parameter_count()} parameters\t{state.step} steps")


def _predict(cloud, net, cfg):
    policy = rangeproj.OverflowPolicy(cfg.get("infer", "overflow_policy"))
    dtype = np.dtype(cfg.get("infer", "dtype"))
    probs = T.infer(net, cloud, policy=policy, dtype=dtype)
    labels = (probs >= cfg.getfloat("infer", "threshold")).astype(np.uint8)
    if cfg.getbool("postprocess", "enabled"):
        labels = postprocess.apply(probs, cloud, cfg.getfloat("postprocess", "limit_m"),
                                   cfg.getfloat("postprocess", "ground_margin_m"),
                                   cfg.getfloat("postprocess", "threshold"))
    return probs, labels


def cmd_infer(args, cfg):
    state = T.load_checkpoint(args.checkpoint, cfg.net())
    out = _outdir(args.out, cfg)
    for path, cloud in zip(args.scans, _scans(args.scans, cfg)):
        probs, labels = _predict(cloud, state.net, cfg)
        stem = out / Path(path).stem
        stem.with_suffix(".prob").write_bytes(probs.astype("<f4").tobytes())
        write_labels(labels, stem.with_suffix(".label"))
        print(f"{stem.with_suffix('.label')}\t{int(labels.sum())} snow / {len(labels)}")


def cmd_eval(args, cfg):
    snow_ids = cfg.snow_ids()
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    preds = sorted(pred_dir.glob("*.label"))
    if not preds:
        raise StageError("eval", f"no .label files in {pred_dir}")
    records = []
    for p in preds:
        g = gt_dir / p.name
        if not g.exists():
            raise StageError("eval", f"no ground truth {g} for prediction {p}")
        rec = evaluation.confusion(read_labels(p, (1,)), read_labels(g, snow_ids))
        records.append(rec)
    mode = cfg.get("eval", "aggregation")
    betas = cfg.getlist("eval", "betas", float)
    betas = tuple(int(b) if float(b).is_integer() else b for b in betas)
    summary = evaluation.aggregate(records, mode=mode, betas=betas)
    report = evaluation.format_report({args.name: summary}, mode=mode)
    kv = "".join(evaluation.record_kv(f"scan.{p.stem}", r) for p, r in zip(preds, records))
    kv += evaluation.format_kv(args.name, summary)
    if args.out:
        out = _outdir(args.out, cfg)
        (out / "report.txt").write_text(report)
        (out / "metrics.kv").write_text(kv)
    print(report, end="")


def cmd_bench(args, cfg):
    scans = _scans(args.scans, cfg)
    fc = cfg.filters()
    warmup, reps = cfg.getint("bench", "warmup"), cfg.getint("bench", "reps")
    rows = {}
    for name in [n for n in args.filters.split(",") if n]:
        if name == "liornet":
            if not args.checkpoint:
                raise StageError("bench", "liornet needs --checkpoint")
            net = T.load_checkpoint(args.checkpoint, cfg.net()).net

            def fn(c, net=net):
                return _predict(c, net, cfg)
        elif name == "pseudolabel":
            pl = cfg.pseudolabel()

            def fn(c, pl=pl):
                return pseudolabel.generate(c, pl)
        else:
            def fn(c, name=name):
                return baselines.run_filter(name, c, fc)
        rows[name] = evaluation.bench(fn, scans, warmup=warmup, reps=reps)
    report = evaluation.format_bench(rows)
    env = next(iter(rows.values())).environment if rows else evaluation.environment()
    report += "# " + " ".join(f"{k}={v}" for k, v in env.items()) + "\n"
    if args.out:
        out = _outdir(args.out, cfg)
        (out / "bench.txt").write_text(report)
    print(report, end="")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="liornet", description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="INI file layered over the built-in defaults")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write synthetic scans with ground-truth labels")
    p.add_argument("out")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("project", help="write range-image blobs")
    p.add_argument("scans", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("pseudolabel", help="write pseudo-labels and provenance")
    p.add_argument("scans", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pseudolabel)

    p = sub.add_parser("filter", help="run a classical filter")
    p.add_argument("name", choices=baselines.FILTERS)
    p.add_argument("scans", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("train", help="self-supervised training on pseudo-labels")
    p.add_argument("scans", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="per-point snow probabilities and labels")
    p.add_argument("checkpoint")
    p.add_argument("scans", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="metrics of predicted labels against ground truth")
    p.add_argument("--pred", required=True, help="directory of predicted .label files")
    p.add_argument("--gt", required=True, help="directory of ground-truth .label files")
    p.add_argument("--name", default="method")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="per-scan runtime of filters")
    p.add_argument("scans", nargs="+")
    p.add_argument("--filters", default="ror,sor,dror,lior,pseudolabel")
    p.add_argument("--checkpoint")
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    rest, overrides = split_overrides(argv)
    args = build_parser().parse_args(rest)
    stage = args.command
    try:
        cfg = Config.load(args.config, overrides)
        args.func(args, cfg)
    except ConfigError as exc:
        print(f"liornet {stage}: config error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"liornet {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, FloatingPointError) as exc:
        print(f"liornet {stage}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
