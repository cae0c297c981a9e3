"""Command-line entry point: ``adamcu <command> [flags]``.

Commands: generate-data, train, evaluate, ablate, inspect.  Every run is
driven by one master ``--seed``; flags override values from ``--config``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import segnet, synthdata, trainer
from .centers import Dccm
from .config import RunConfig, format_config, load_config
from .uncertainty import Thresholds, partition, uncertainty_score

log = logging.getLogger("adamcu")

CONFIG_NAME = "config.txt"
METRICS_NAME = "metrics.jsonl"
CHECKPOINT_NAME = "checkpoint.bin"
LABELS_NAME = "labels.txt"
DCCM_NAME = "dccm.csv"


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


# ---------------------------------------------------------------- config


def _base_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "categories", None) is not None:
        cfg.scene.num_classes = cfg.net.num_classes = args.categories
    return cfg


def effective_config(args) -> RunConfig:
    """Config file, then variant preset, then individual flags."""
    cfg = _base_config(args)
    if getattr(args, "variant", None):
        cfg = trainer.variant_config(cfg, args.variant)
    t = cfg.train
    for flag, field_ in (("budget", "budget"), ("gamma", "gamma"), ("lam", "contrast_weight"),
                         ("beta", "beta"), ("epochs", "epochs")):
        v = getattr(args, flag, None)
        if v is not None:
            setattr(t, field_, v)
    if getattr(args, "no_contrast", False):
        t.mcu_image = t.mcu_domain = t.dccm = False
    if getattr(args, "no_dccm", False):
        t.dccm = False
    if getattr(args, "no_as", False):
        t.active_sampling = False
        cfg.sampler.adaptive = False
    if getattr(args, "data", None):
        cfg.paths.data = args.data
    if getattr(args, "out", None):
        cfg.paths.out = args.out
    cfg.validate()
    return cfg


def _benchmark(cfg: RunConfig, data_dir: str | None) -> synthdata.Benchmark:
    if data_dir:
        if not Path(data_dir, "manifest.txt").exists():
            raise CliError(f"dataset not found: {data_dir}/manifest.txt")
        bench = synthdata.load_benchmark(data_dir)
        if bench.target_train.num_classes != cfg.net.num_classes:
            raise CliError(f"dataset has {bench.target_train.num_classes} categories, "
                           f"config expects {cfg.net.num_classes}")
        return bench
    d = cfg.data
    return synthdata.make_benchmark(trainer.Seeds.derive(cfg.seed).data, d.n_source, d.n_target, d.n_val,
                                    cfg.scene, cfg.shift)


def _out_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {out}: {exc.strerror}") from None
    return out


# ---------------------------------------------------------------- commands


def cmd_generate_data(args) -> int:
    cfg = _base_config(args)
    cfg.scene.validate()
    d = cfg.data
    bench = synthdata.make_benchmark(trainer.Seeds.derive(cfg.seed).data, d.n_source, d.n_target, d.n_val,
                                     cfg.scene, cfg.shift)
    out = _out_dir(args.out)
    synthdata.save(bench, out)
    for ds in bench.splits():
        hist = np.bincount(ds.labels.reshape(-1), minlength=ds.num_classes) / ds.labels.size
        print(f"{ds.key:<14} {len(ds):4d} images  category fractions "
              + " ".join(f"{v:.3f}" for v in hist))
    print(f"wrote {out / 'manifest.txt'}")
    return 0


def cmd_train(args) -> int:
    cfg = effective_config(args)
    bench = _benchmark(cfg, args.data)
    out = _out_dir(cfg.paths.out)
    (out / CONFIG_NAME).write_text(format_config(cfg))
    net0 = segnet.load_checkpoint(args.init) if args.init else None
    with open(out / METRICS_NAME, "w") as fh:
        def write(rec):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            fh.flush()

        res = trainer.train(cfg, bench, net0, on_record=write)
    segnet.save_checkpoint(res.net, out / CHECKPOINT_NAME)
    res.labels.export(out / LABELS_NAME)
    res.dccm.dump(out / DCCM_NAME)
    last = res.records[-1]
    print(f"target val mIoU {last['miou']:.4f}  labelled {res.budget.labeled}/{res.budget.expected} pixels")
    print(f"wrote {out}")
    return 0


def _checkpoint_and_config(args) -> tuple[segnet.SegNet, RunConfig]:
    ck = Path(args.checkpoint)
    if not ck.exists():
        raise CliError(f"checkpoint not found: {ck}")
    net = segnet.load_checkpoint(ck)
    if args.config:
        cfg = load_config(args.config)
    elif (ck.parent / CONFIG_NAME).exists():
        cfg = load_config(ck.parent / CONFIG_NAME)
    else:
        cfg = RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if cfg.net != net.config:
        cfg.net = net.config
        cfg.scene.num_classes = net.config.num_classes
    return net, cfg


def cmd_evaluate(args) -> int:
    net, cfg = _checkpoint_and_config(args)
    bench = _benchmark(cfg, args.data)
    ds = bench.target_val if args.split == "val" else bench.target_train if args.split == "train" \
        else bench.source_train
    ev = trainer.evaluate(net, ds)
    lines = ["category,iou"]
    lines += [f"{c},{'' if np.isnan(v) else repr(float(v))}" for c, v in enumerate(ev["iou"])]
    lines.append(f"mean,{ev['miou']!r}")
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.out:
        (_out_dir(args.out) / "iou.csv").write_text(text)
    return 0


def cmd_ablate(args) -> int:
    cfg = effective_config(args)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    for v in variants:
        trainer.variant_config(cfg, v)
    bench_fn = (lambda _seed: _benchmark(cfg, args.data)) if args.data else None
    rows = trainer.ablate(cfg, variants, args.n_seeds, bench_fn)
    table = trainer.format_table(rows)
    print(table)
    if args.out:
        out = _out_dir(args.out)
        (out / CONFIG_NAME).write_text(format_config(cfg))
        (out / "ablation.txt").write_text(table + "\n")
        (out / "ablation.csv").write_text(trainer.table_csv(rows))
    return 0


def write_pgm(path, img: np.ndarray, maxval: int = 255) -> None:
    """Plain (ASCII) portable graymap."""
    img = np.asarray(img, dtype=np.int64)
    h, w = img.shape
    rows = [" ".join(str(v) for v in r) for r in img]
    Path(path).write_text(f"P2\n{w} {h}\n{maxval}\n" + "\n".join(rows) + "\n")


def read_pgm(path) -> np.ndarray:
    toks = [t for ln in Path(path).read_text().splitlines() for t in ln.split("#", 1)[0].split()]
    if not toks or toks[0] != "P2":
        raise ValueError(f"{path}: not a plain graymap")
    w, h = int(toks[1]), int(toks[2])
    vals = np.array([int(t) for t in toks[4:]], dtype=np.int64)
    if vals.size != w * h:
        raise ValueError(f"{path}: expected {w * h} pixels, got {vals.size}")
    return vals.reshape(h, w)


def score_to_gray(scores: np.ndarray) -> np.ndarray:
    m = float(scores.max())
    if m <= 0:
        return np.zeros(scores.shape, dtype=np.int64)
    return np.rint(255.0 * scores / m).astype(np.int64)


# gray levels for the group masks
GROUP_LEVELS = {"low": 0, "medium": 128, "high": 255}


def cmd_inspect(args) -> int:
    net, cfg = _checkpoint_and_config(args)
    bench = _benchmark(cfg, args.data)
    ds = bench.target_val if args.split == "val" else bench.target_train
    ids = [int(i) for i in args.images.split(",") if i.strip()]
    for i in ids:
        if not 0 <= i < len(ds):
            raise CliError(f"image index {i} outside [0, {len(ds)})")
    out = _out_dir(args.out)
    thr = Thresholds(args.pi_high if args.pi_high is not None else cfg.sampler.pi_high_init,
                     cfg.sampler.pi_low)
    c = cfg.net.num_classes
    for i in ids:
        o = segnet.forward(net, ds.images[i].astype(np.float64))
        mp, ap = trainer.softmax_np(o.main_logits.data[0]), trainer.softmax_np(o.aux_logits.data[0])
        s = uncertainty_score(mp, ap, cfg.train.gamma).scores
        g = partition(s, thr)
        write_pgm(out / f"score_{i:04d}.pgm", score_to_gray(s))
        mask = np.zeros(s.shape, dtype=np.int64)
        mask[g.medium] = GROUP_LEVELS["medium"]
        mask[g.high] = GROUP_LEVELS["high"]
        write_pgm(out / f"groups_{i:04d}.pgm", mask)
        write_pgm(out / f"pred_{i:04d}.pgm", np.argmax(mp, axis=-1), maxval=c - 1)
        write_pgm(out / f"gt_{i:04d}.pgm", ds.labels[i], maxval=c - 1)
    dump = Path(args.checkpoint).parent / DCCM_NAME
    if dump.exists():
        (out / DCCM_NAME).write_text(dump.read_text())
    else:
        Dccm.initial(c, cfg.train.beta, cfg.train.eps_floor).dump(out / DCCM_NAME)
    print(f"wrote {len(ids)} image(s) to {out}")
    return 0


# ---------------------------------------------------------------- parser


def _add_common(p, out_required=False):
    p.add_argument("--config", help="config file (section.key = value lines)")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--out", required=out_required, help="output directory")
    p.add_argument("--data", help="dataset directory (default: generate from the seed)")


def _add_train_flags(p):
    p.add_argument("--budget", type=float, help="target label budget ratio")
    p.add_argument("--gamma", type=float, help="KL weight in the uncertainty score")
    p.add_argument("--lambda", dest="lam", type=float, help="contrastive loss weight")
    p.add_argument("--beta", type=float, help="DCCM momentum")
    p.add_argument("--epochs", type=int)
    p.add_argument("--variant", help=", ".join(trainer.VARIANTS))
    p.add_argument("--no-contrast", action="store_true")
    p.add_argument("--no-dccm", action="store_true")
    p.add_argument("--no-as", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="adamcu", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate-data", help="write the synthetic benchmark")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--categories", type=int)
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", help="source pretraining + adaptation")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--init", help="start from this checkpoint instead of source pretraining")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="IoU table of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--split", choices=("val", "train", "source"), default="val")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="variant comparison over seeds")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--variants", default="SourceOnly,AL(w AS),FullModel")
    p.add_argument("--n-seeds", type=int, default=3)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("inspect", help="uncertainty graymaps, group masks, label maps, W")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.add_argument("--images", default="0")
    p.add_argument("--split", choices=("val", "train"), default="val")
    p.add_argument("--pi-high", type=float)
    p.set_defaults(func=cmd_inspect)
    return ap


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(message)s", stream=sys.stderr)
        return args.func(args)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001 - one-line diagnostic for any failure
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"adamcu: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
