"""
Command-line entry point.

    vig-landcover synth --classes 8 --per-class 32 --c 3 --hw 32 --out data/
    vig-landcover train run.cfg --seed 1 --out runs/s1
    vig-landcover train --aggregate runs/s1 runs/s2 runs/s3
    vig-landcover evaluate runs/s1/checkpoint.vigt data/manifest.txt --split test
    vig-landcover inspect-graph runs/s1/checkpoint.vigt data/samples/00000.vigt --stage 1 --out edges.txt

Exit codes: 0 success, 1 runtime/data error, 2 usage/config error.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from .data import load_dataset, load_sample, read_manifest, split_dataset, synthesize_dataset
from .errors import ConfigurationError, DataError, FormatError, TrainingError, UsageError
from .metrics import confusion_counts, decide_labels, metric_report, parse_kv
from .model import ForwardTrace, build_model
from .runconfig import load_run_config, render_resolved
from .training import fit, load_checkpoint, predict_logits, save_checkpoint

log = logging.getLogger("vig_landcover")

CHECKPOINT = "checkpoint.vigt"
HISTORY = "history.txt"
METRICS_TXT = "metrics.txt"
METRICS_KV = "metrics.kv"
RESOLVED = "config.resolved"


def _write(path, text):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def format_history(history) -> str:
    lines = [f"{'epoch':>6} {'train_loss':>16} {'val_loss':>16} {'lr':>12}"]
    for h in history:
        lines.append(f"{h['epoch']:>6d} {h['train_loss']:>16.8e} {h['val_loss']:>16.8e} {h['lr']:>12.4e}")
    return "\n".join(lines) + "\n"


def probabilities(logits: np.ndarray, task: str) -> np.ndarray:
    if task == "multiclass":
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)
    return 1.0 / (1.0 + np.exp(-logits))


def evaluate_dataset(model, ds):
    """Metric report of ``model`` on ``ds`` (macro for multiclass, micro for multilabel)."""
    task = model.cfg.task
    probs = probabilities(predict_logits(model, ds.images), task)
    pred = decide_labels(probs, task)
    counts = confusion_counts(pred, ds.targets(), model.cfg.num_classes, task=task)
    return metric_report(counts)


def write_report(report, out_dir):
    _write(os.path.join(out_dir, METRICS_TXT), report.to_text())
    _write(os.path.join(out_dir, METRICS_KV), report.to_kv())


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    if args.aggregate:
        return cmd_aggregate(args.aggregate)
    if not args.config:
        raise UsageError("train needs a config file (or --aggregate DIR...)")
    rc = load_run_config(args.config)
    if args.seed is not None:
        rc.train["seed"] = args.seed
    out_dir = args.out or rc.output.get("dir")
    if not out_dir:
        raise ConfigurationError("no output directory: pass --out or set [output] dir")
    train_cfg = rc.train_config()
    manifest_path = rc.manifest_path()
    manifest = read_manifest(manifest_path)
    model_cfg = rc.model_config(manifest)
    if (model_cfg.in_channels, model_cfg.input_hw, model_cfg.num_classes) != (
            manifest.channels, (manifest.height, manifest.width), manifest.classes):
        raise ConfigurationError("[model] in_channels/input_hw/num_classes disagree with the manifest header")
    bands = rc.data.get("bands")
    data_echo = {"manifest": rc.data.get("manifest"), "bands": bands,
                 "split_seed": rc.split_seed(), "fractions": list(rc.fractions())}

    ds = load_dataset(manifest_path, bands)
    train_set, val_set, test_set = split_dataset(ds, rc.fractions(), rc.split_seed())
    os.makedirs(out_dir, exist_ok=True)
    _write(os.path.join(out_dir, RESOLVED), render_resolved(model_cfg, train_cfg, data_echo, out_dir))

    model = build_model(model_cfg, seed=train_cfg.seed)
    result = fit(model, train_set, val_set, train_cfg)
    save_checkpoint(
        os.path.join(out_dir, CHECKPOINT), model, result.optimizer,
        epoch=result.best_epoch, best_val_loss=result.best_val_loss,
        extra={"train": train_cfg.to_dict(), "data": data_echo}, state=result.best_state,
    )
    _write(os.path.join(out_dir, HISTORY), format_history(result.history))
    if len(test_set):
        write_report(evaluate_dataset(model, test_set), out_dir)
    print(f"best epoch {result.best_epoch}, val loss {result.best_val_loss:.6f}; outputs in {out_dir}")
    return 0


def cmd_aggregate(dirs) -> int:
    """Print mean ± std of every metric (and best val loss) across run directories."""
    per_key = {}
    for d in dirs:
        kv_path = os.path.join(d, METRICS_KV)
        if os.path.exists(kv_path):
            with open(kv_path, encoding="utf-8") as fh:
                for k, v in parse_kv(fh.read()).items():
                    per_key.setdefault(k, []).append(v)
        hist_path = os.path.join(d, HISTORY)
        if not os.path.exists(hist_path) and not os.path.exists(kv_path):
            raise DataError(f"{d}: no {HISTORY} or {METRICS_KV}")
        if os.path.exists(hist_path):
            vals = np.loadtxt(hist_path, skiprows=1, ndmin=2)
            per_key.setdefault("best_val_loss", []).append(float(vals[:, 2].min()))
    print(f"{'metric':<16}{'mean':>12}{'std':>12}{'runs':>6}")
    for key, vals in per_key.items():
        arr = np.asarray(vals)
        scale = 1.0 if key == "best_val_loss" else 100.0
        print(f"{key:<16}{scale * arr.mean():>12.4f}{scale * arr.std():>12.4f}{len(arr):>6d}")
    return 0


# ---------------------------------------------------------------------------
# evaluate / inspect-graph / synth
# ---------------------------------------------------------------------------

def _check_compatible(cfg, manifest):
    got = (manifest.channels, (manifest.height, manifest.width), manifest.classes, manifest.task)
    want = (cfg.in_channels, cfg.input_hw, cfg.num_classes, cfg.task)
    if got != want:
        raise DataError(
            f"checkpoint expects channels={want[0]} hw={want[1]} classes={want[2]} task={want[3]}, "
            f"manifest has channels={got[0]} hw={got[1]} classes={got[2]} task={got[3]}"
        )


def cmd_evaluate(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.build()
    manifest = read_manifest(args.manifest)
    _check_compatible(model.cfg, manifest)
    data_meta = ckpt.meta.get("data", {})
    ds = load_dataset(args.manifest, data_meta.get("bands"))
    if args.split != "all":
        parts = split_dataset(ds, tuple(data_meta.get("fractions", (0.70, 0.15, 0.15))),
                              data_meta.get("split_seed", 0))
        ds = dict(zip(("train", "val", "test"), parts))[args.split]
    if len(ds) == 0:
        raise DataError(f"split {args.split!r} is empty")
    report = evaluate_dataset(model, ds)
    out_dir = args.out or os.path.dirname(os.path.abspath(args.checkpoint))
    os.makedirs(out_dir, exist_ok=True)
    write_report(report, out_dir)
    print(report.to_text(), end="")
    return 0


def cmd_inspect_graph(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.build()
    cfg = model.cfg
    bands = ckpt.meta.get("data", {}).get("bands")
    image = load_sample(args.sample, bands, *cfg.input_hw)
    if image.shape[0] != cfg.in_channels:
        raise DataError(f"{args.sample}: {image.shape[0]} bands, checkpoint expects {cfg.in_channels}")
    trace = ForwardTrace()
    model.forward(image[None], "eval", trace=trace)
    neighbors, dists = trace.graphs[args.stage - 1]
    lines = []
    for i in range(neighbors.shape[1]):
        for r in range(neighbors.shape[2]):
            lines.append(f"{args.stage} {i} {int(neighbors[0, i, r])} {r} {float(dists[0, i, r]):.9g}")
    text = "\n".join(lines) + ("\n" if lines else "")
    if args.out:
        _write(args.out, text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_synth(args) -> int:
    task = "multilabel" if args.multilabel else "multiclass"
    path = synthesize_dataset(args.out, args.classes, args.per_class, args.c, args.hw, args.hw,
                              task=task, seed=args.seed)
    print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vig-landcover", description="Vision GNN land-cover classifier")
    parser.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a run config")
    p.add_argument("config", nargs="?")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--aggregate", nargs="+", metavar="DIR", help="summarise finished runs instead of training")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="compute metrics for a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("inspect-graph", help="dump the k-NN edges built for one sample")
    p.add_argument("checkpoint")
    p.add_argument("sample")
    p.add_argument("--stage", type=int, choices=(1, 2, 3), default=1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_inspect_graph)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--per-class", type=int, required=True)
    p.add_argument("--c", type=int, required=True, help="channels")
    p.add_argument("--hw", type=int, required=True, help="image height and width")
    p.add_argument("--multilabel", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigurationError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataError, FormatError, TrainingError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
