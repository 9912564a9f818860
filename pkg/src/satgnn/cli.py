"""satgnn command line: train, attention statistics, beta sweeps, irrelevance
statistics, the expressivity report and the ablation table.

Datasets are bundle directories. ``--dataset`` takes a path, or a name that
is looked up under ``--data-dir`` (default ``$SATGNN_DATA`` or ``./data``).
Options may also come from a ``key=value`` config file given with
``--config``; flags on the command line win.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .analysis import (
    attention_histogram,
    beta_sweep,
    irrelevance_stats,
    low_attention,
    output_attention,
)
from .dissimilarity import DISSIM_MODES
from .expressivity import collision_sweep, converse_probe
from .graph import BundleFormatError, Graph, GraphValidationError, load_bundle
from .layer import CONTRACTIVE, STRATEGIES, SUBTRACTIVE
from .model import (
    ABLATION_VARIANTS,
    CheckpointError,
    ConfigError,
    TrainConfig,
    TrainingDivergedError,
    build_model,
    format_ablation,
    load_checkpoint,
    run_ablation,
    save_checkpoint,
    train,
)

log = logging.getLogger("satgnn")

# flag dest -> TrainConfig field
TRAIN_FIELDS = {
    "strategy": "strategy",
    "beta": "beta",
    "dissim": "dissim",
    "heads": "hidden_heads",
    "output_heads": "output_heads",
    "hidden": "hidden_dim",
    "lr": "lr",
    "weight_decay": "weight_decay",
    "dropout": "dropout",
    "epochs": "epochs",
    "seed": "seed",
    "mf_weight": "mf_weight",
    "mf_exact_threshold": "mf_exact_threshold",
    "reduce_dim": "reduce_dim",
    "reduce_threshold": "reduce_threshold",
}


class UsageError(Exception):
    pass


def default_data_dir() -> Path:
    return Path(os.environ.get("SATGNN_DATA", "data"))


def resolve_dataset(name: str, data_dir: Optional[str] = None) -> Graph:
    direct = Path(name)
    if direct.is_dir():
        return load_bundle(direct)
    base = Path(data_dir) if data_dir else default_data_dir()
    candidate = base / name
    if candidate.is_dir():
        return load_bundle(candidate)
    raise FileNotFoundError(
        f"dataset {name!r} not found (looked for {direct} and {candidate}); "
        "see the README for the bundle format"
    )


def read_config_file(path: str) -> dict:
    out = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dataset", help="bundle directory, or a name under --data-dir")
    p.add_argument("--data-dir", help="directory holding named bundles")
    p.add_argument("--strategy", choices=STRATEGIES, default=CONTRACTIVE)
    p.add_argument("--beta", type=float, help="default 1.0 contractive, 0.5 subtractive")
    p.add_argument("--dissim", choices=DISSIM_MODES, default="both")
    p.add_argument("--heads", type=int, default=8, help="hidden-layer heads")
    p.add_argument("--output-heads", type=int, default=1)
    p.add_argument("--hidden", type=int, default=8, help="per-head hidden width")
    p.add_argument("--lr", type=float, default=0.005)
    p.add_argument("--weight-decay", type=float, default=5e-4)
    p.add_argument("--dropout", type=float, default=0.6)
    p.add_argument("--epochs", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mf-weight", type=float, default=1.0)
    p.add_argument("--mf-exact-threshold", type=int, default=5000)
    p.add_argument("--reduce-dim", type=int, default=512, help="width of the linear pre-layer")
    p.add_argument("--reduce-threshold", type=int, default=2048,
                   help="use the pre-layer only for feature dims above this")
    p.add_argument("--workers", type=int, default=1, help="parallel worker processes")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="satgnn", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", help="key=value file of option defaults")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model, write metrics.json and a checkpoint")
    _add_train_flags(p)
    p.add_argument("--out", default="run", help="output directory")

    p = sub.add_parser("attn-stats", help="export output-layer attention and low-score counts")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--data-dir")
    p.add_argument("--threshold", type=float, default=0.05)
    p.add_argument("--out", default="attention")

    p = sub.add_parser("beta-sweep", help="train per beta; accuracy and low-attention counts")
    _add_train_flags(p)
    p.add_argument("--betas", default="0.1,0.5,0.75,1.0")
    p.add_argument("--threshold", type=float, default=0.05)
    p.add_argument("--out", default="beta_sweep.csv")

    p = sub.add_parser("irrelevance", help="feature-distance and common-neighbor statistics")
    p.add_argument("--dataset", required=True)
    p.add_argument("--data-dir")
    p.add_argument("--out", default="irrelevance")

    p = sub.add_parser("expressivity", help="collision/separation report for constructed multisets")
    p.add_argument("--pairs", type=int, default=100)
    p.add_argument("--epsilon", type=float, default=0.5)
    p.add_argument("--random-g", action="store_true", help="use a random linear feature map")
    p.add_argument("--out", help="JSON file (default: stdout)")

    p = sub.add_parser("ablation", help="GAT / C-F / C-P / SAT-C / S-F / S-P / SAT-S table")
    _add_train_flags(p)
    p.add_argument("--seeds", type=int, default=1, help="seeds 0..N-1 per variant")
    p.add_argument("--variants", default=",".join(ABLATION_VARIANTS))
    p.add_argument("--out", default="ablation.csv")
    return parser


def _config_value(action: argparse.Action, raw: str):
    if isinstance(action, argparse._StoreTrueAction):
        return raw.lower() in ("1", "true", "yes", "on")
    return action.type(raw) if action.type else raw


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    command = next((a for a in argv if a in COMMANDS), None)
    if not known.config or command is None:
        return parser.parse_args(argv)
    try:
        values = read_config_file(known.config)
    except OSError as exc:
        parser.error(f"cannot read config file: {exc}")
    except UsageError as exc:
        parser.error(str(exc))
    sub = parser._subparsers._group_actions[0].choices[command]
    actions = {a.dest: a for a in sub._actions if a.dest != "help"}
    unknown = sorted(set(values) - set(actions))
    if unknown:
        parser.error(f"unknown config keys for {command}: {', '.join(unknown)}")
    typed = {}
    for dest, raw in values.items():
        action = actions[dest]
        try:
            typed[dest] = _config_value(action, raw)
        except ValueError:
            parser.error(f"config {dest}={raw!r}: bad value")
        if action.choices and typed[dest] not in action.choices:
            parser.error(f"config {dest}={raw!r} not in {sorted(action.choices)}")
        action.required = False
    # file values become defaults, so flags given on the command line still win
    sub.set_defaults(**typed)
    return parser.parse_args(argv)


def config_from_args(args: argparse.Namespace) -> TrainConfig:
    kwargs = {field: getattr(args, dest) for dest, field in TRAIN_FIELDS.items()}
    return TrainConfig(**kwargs)


def _need_dataset(args) -> Graph:
    if not args.dataset:
        raise UsageError("--dataset is required")
    return resolve_dataset(args.dataset, args.data_dir)


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def cmd_train(args) -> int:
    config = config_from_args(args)
    graph = _need_dataset(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = build_model(config, graph)
    metrics = train(model, graph)
    payload = {
        "config": metrics.config,
        "per_epoch": metrics.per_epoch,
        "best_epoch": metrics.best_epoch,
        "train_acc": metrics.train_acc,
        "val_acc": metrics.val_acc,
        "test_acc": metrics.test_acc,
        "cluster_acc": metrics.cluster_acc,
        "seconds": metrics.seconds,
        "seed": metrics.seed,
        "parameters": model.parameter_count(),
    }
    _write_json(out / "metrics.json", payload)
    save_checkpoint(model, out / "checkpoint.npz", graph)
    print(f"test_acc={metrics.test_acc:.4f} cluster_acc={metrics.cluster_acc:.4f} "
          f"best_epoch={metrics.best_epoch} -> {out}")
    return 0


def cmd_attn_stats(args) -> int:
    graph = resolve_dataset(args.dataset, args.data_dir)
    model = load_checkpoint(args.checkpoint, graph)
    alpha = output_attention(model, graph)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = model.config
    with open(out / "attention.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["source", "destination", "alpha", "self_loop", "strategy", "beta"])
        for src, dst, a, loop in zip(graph.indices, graph.row, alpha, graph.is_self_loop):
            w.writerow([int(src), int(dst), repr(float(a)), int(loop), cfg.strategy, cfg.beta])
    counts, edges = attention_histogram(alpha)
    with open(out / "histogram.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_low", "bin_high", "count"])
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            w.writerow([f"{lo:.2f}", f"{hi:.2f}", int(c)])
    low = low_attention(alpha, graph, args.threshold)
    stats = {
        "strategy": cfg.strategy,
        "beta": cfg.beta,
        "threshold": args.threshold,
        "edges_total": graph.num_edges,
        "neighbor_edges": low.edges,
        "low_count": low.count,
        "low_fraction": low.fraction,
        "exact_zeros": int(np.count_nonzero(alpha[~graph.is_self_loop] == 0.0)),
    }
    _write_json(out / "stats.json", stats)
    print(f"{low.count} of {low.edges} neighbor edges have alpha <= {args.threshold} ({low.fraction:.3f})")
    return 0


def _parse_floats(text: str) -> list:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None


def cmd_beta_sweep(args) -> int:
    betas = _parse_floats(args.betas)
    if not betas:
        raise UsageError("--betas is empty")
    config = config_from_args(args)
    for b in betas:
        config.replace(beta=b)  # validates each beta before any training
    graph = _need_dataset(args)
    rows = beta_sweep(config, graph, betas, args.threshold, args.workers)
    fields = ["beta", "seed", "test_acc", "val_acc", "low_count", "low_fraction", "edges"]
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)
    for r in rows:
        print(f"beta={r['beta']:<5} test_acc={r['test_acc']:.4f} low={r['low_count']} ({r['low_fraction']:.3f})")
    return 0


def cmd_irrelevance(args) -> int:
    graph = resolve_dataset(args.dataset, args.data_dir)
    stats = irrelevance_stats(graph)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "feature_distance_cdf.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["normalized_distance", "fraction_at_or_below"])
        for t, f in stats.distance_cdf:
            w.writerow([f"{t:.2f}", f"{f:.6f}"])
    with open(out / "common_neighbors.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["common_neighbors", "pairs", "fraction_at_or_below"])
        for k, c, f in stats.common_cdf:
            w.writerow([int(k), int(c), f"{f:.6f}"])
    _write_json(out / "summary.json", stats.to_dict())
    print(json.dumps(stats.to_dict(), indent=2))
    return 0


def cmd_expressivity(args) -> int:
    if args.pairs < 1 or args.epsilon <= 0:
        raise UsageError("--pairs must be >= 1 and --epsilon > 0")
    report = {}
    for strategy in (CONTRACTIVE, SUBTRACTIVE):
        r = collision_sweep(strategy, range(args.pairs), args.epsilon, random_g=args.random_g)
        r["converse_distinct_fraction"] = converse_probe(strategy, trials=args.pairs)
        report[strategy] = r
    report["pairs_tested"] = sum(report[s]["pairs_tested"] for s in (CONTRACTIVE, SUBTRACTIVE))
    report["collisions_confirmed"] = sum(report[s]["collisions_confirmed"] for s in (CONTRACTIVE, SUBTRACTIVE))
    report["separations_confirmed"] = sum(report[s]["separations_confirmed"] for s in (CONTRACTIVE, SUBTRACTIVE))
    report["min_separation"] = min(report[s]["min_separation"] for s in (CONTRACTIVE, SUBTRACTIVE))
    text = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    ok = report["collisions_confirmed"] == report["separations_confirmed"] == report["pairs_tested"]
    return 0 if ok else 1


def cmd_ablation(args) -> int:
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    bad = [v for v in variants if v not in ABLATION_VARIANTS]
    if bad or args.seeds < 1:
        raise UsageError(f"unknown variants {bad}" if bad else "--seeds must be >= 1")
    config = config_from_args(args)
    graph = _need_dataset(args)
    rows = run_ablation(config, graph, range(args.seeds), variants, args.workers)
    table = format_ablation(rows)
    Path(args.out).write_text(table, encoding="utf-8")
    print(table, end="")
    return 0


COMMANDS = {
    "train": cmd_train,
    "attn-stats": cmd_attn_stats,
    "beta-sweep": cmd_beta_sweep,
    "irrelevance": cmd_irrelevance,
    "expressivity": cmd_expressivity,
    "ablation": cmd_ablation,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"satgnn {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, BundleFormatError, GraphValidationError, CheckpointError,
            TrainingDivergedError) as exc:
        print(f"satgnn {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
