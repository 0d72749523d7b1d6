"""Command-line entry point.

Commands: ``analyze`` (complexity report and golden checks),
``gradcheck`` (finite-difference verification), ``train`` / ``eval``
(the full recipe on the synthetic dataset), and ``synth`` (dataset
manifests and clip dumps).

Exit codes: 0 success, 1 validation error, 2 runtime failure, 3 golden
check breach.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__
from .analysis import report
from .config import (
    SCHEMA,
    ConfigError,
    describe_keys,
    load_run_config,
    resolve,
)
from .datapipe import ClipPipeline, SyntheticMotionDataset
from .gradcheck import OP_NAMES, SIZE_PRESETS, run_suite
from .network import (
    CheckpointError,
    NetworkConfig,
    build,
    load_checkpoint,
    network_layout,
    parse_size,
)
from .tensor import save_tensor
from .trainer import evaluate, fit

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_GOLDEN = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # route argparse failures to exit code 1
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------

def _network_from_args(args) -> NetworkConfig:
    if args.config:
        return load_run_config(args.config).network()
    return NetworkConfig(
        variant=args.variant,
        group_width=args.group_width,
        num_classes=args.classes,
        se_enabled=args.se,
        se_reduction=args.se_reduction,
        dropout_rate=0.5,
        input_frames=args.frames,
        input_size=parse_size(args.size),
    )


def _load_golden(path) -> tuple[NetworkConfig, dict]:
    items: dict[str, str] = {}
    try:
        with open(path) as f:
            for lineno, line in enumerate(f, start=1):
                stripped = line.strip()
                if not stripped or stripped.startswith("#"):
                    continue
                if "=" not in stripped:
                    raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
                key, _, value = stripped.partition("=")
                items[key.strip()] = value.strip()
    except OSError as exc:
        raise ConfigError(f"cannot read golden file {path}: {exc}")
    network_items = {
        k: v for k, v in items.items() if k.startswith("network.")
    }
    for k in network_items:
        if k not in SCHEMA:
            raise ConfigError(f"{path}: unknown key {k!r}")
    cfg = resolve(network_items).network()
    expect = {
        k.removeprefix("expect."): float(v)
        for k, v in items.items()
        if k.startswith("expect.")
    }
    if "params_m" not in expect:
        raise ConfigError(f"{path}: golden file needs expect.params_m")
    return cfg, expect


def check_golden(path) -> list[str]:
    """PASS/FAIL lines for one golden file; raises nothing on breach."""
    cfg, expect = _load_golden(path)
    rep = report(network_layout(cfg))
    lines = []

    def check(label, got, want, tol_pct):
        ok = abs(got - want) <= tol_pct / 100.0 * want
        lines.append(
            f"{'PASS' if ok else 'FAIL'}  {label}: got {got:.3f}, "
            f"expected {want} within {tol_pct:g}%"
        )
        return ok

    ok = check("params_m", rep.params_millions, expect["params_m"],
               expect.get("params_tol_pct", 2.0))
    if "gmacs" in expect:
        ok &= check("gmacs", rep.gmacs, expect["gmacs"],
                    expect.get("gmacs_tol_pct", 10.0))
    lines.append(("OK   " if ok else "BREACH ") + str(path))
    return lines


def cmd_analyze(args) -> int:
    if args.golden:
        status = EXIT_OK
        for path in args.golden:
            lines = check_golden(path)
            print("\n".join(lines))
            if any(l.startswith("FAIL") for l in lines):
                status = EXIT_GOLDEN
        return status
    cfg = _network_from_args(args)
    rep = report(network_layout(cfg))
    text = rep.as_text()
    print(text)
    if args.out:
        with open(args.out, "w") as f:
            f.write(text + "\n")
    if args.json:
        with open(args.json, "w") as f:
            f.write(rep.as_json() + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    ops = args.ops.split(",") if args.ops else None
    if ops:
        unknown = [o for o in ops if o not in OP_NAMES]
        if unknown:
            raise UsageError(f"unknown ops: {', '.join(unknown)}")
    shapes = SIZE_PRESETS[args.sizes]
    results = run_suite(seed=args.seed, shapes=shapes, ops=ops,
                        sabotage=args.sabotage_op)
    failed = 0
    for r in results:
        flag = "PASS" if r.passed else "FAIL"
        print(f"{flag}  {r.name:24s} max rel err {r.max_rel_error:.3e} "
              f"over {r.shapes} shapes (tol {r.tolerance:g})")
        failed += not r.passed
    print(f"{len(results) - failed}/{len(results)} ops within tolerance")
    return EXIT_OK if failed == 0 else EXIT_RUNTIME


# ---------------------------------------------------------------------------
# train / eval
# ---------------------------------------------------------------------------

def _dataset_and_pipeline(run_cfg):
    dataset = SyntheticMotionDataset(run_cfg.synthetic_spec())
    pipeline = ClipPipeline(run_cfg.pipeline())
    return dataset, pipeline


def cmd_train(args) -> int:
    run_cfg = load_run_config(args.config)
    net_cfg = run_cfg.network()
    data_classes = run_cfg["data.num_classes"]
    if net_cfg.num_classes != data_classes:
        raise ConfigError(
            f"network.num_classes = {net_cfg.num_classes} does not match "
            f"data.num_classes = {data_classes}"
        )
    dataset, pipeline = _dataset_and_pipeline(run_cfg)
    train_cfg = run_cfg.train()
    model = build(net_cfg, seed=train_cfg.seed)
    train_videos = dataset.records("train")
    eval_videos = dataset.records("eval") or None
    out_dir = run_cfg.output_dir()

    def log(record):
        print(json.dumps(record.as_dict()))

    metrics = fit(model, train_videos, eval_videos, train_cfg, pipeline,
                  out_dir=out_dir, log_fn=log)
    print(json.dumps({"summary": metrics.summary()}))
    return EXIT_OK


def cmd_eval(args) -> int:
    run_cfg = load_run_config(args.config)
    if not os.path.exists(args.checkpoint):
        raise ConfigError(f"checkpoint not found: {args.checkpoint}")
    model = load_checkpoint(args.checkpoint)
    data_classes = run_cfg["data.num_classes"]
    if model.config.num_classes != data_classes:
        raise ConfigError(
            f"checkpoint has {model.config.num_classes} classes but "
            f"data.num_classes = {data_classes}"
        )
    dataset, pipeline = _dataset_and_pipeline(run_cfg)
    split = args.split
    videos = dataset.records(split)
    if not videos:
        raise ConfigError(f"split {split!r} is empty in this config")
    multilabel = run_cfg["train.loss"] == "multilabel_bce"
    result = evaluate(model, videos, pipeline, multilabel=multilabel)
    for key, value in result.as_dict().items():
        print(f"{key} {value:.4f}")
    print(json.dumps({"eval": result.as_dict(), "split": split,
                      "videos": len(videos)}))
    return EXIT_OK


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    run_cfg = load_run_config(args.spec)
    dataset = SyntheticMotionDataset(run_cfg.synthetic_spec())
    rows = dataset.manifest_rows()
    lines = ["# split index label seed"]
    lines += [f"{s} {i} {l} {seed}" for s, i, l, seed in rows]
    try:
        with open(args.out, "w") as f:
            f.write("\n".join(lines) + "\n")
    except OSError as exc:
        print(f"cannot write manifest {args.out}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"wrote {len(rows)} rows to {args.out}")
    if args.dump_dir:
        os.makedirs(args.dump_dir, exist_ok=True)
        count = 0
        for split, index, _label, _seed in rows[: args.dump_count]:
            clip = dataset.render_clip(split, index)
            save_tensor(
                os.path.join(args.dump_dir, f"{split}_{index:05d}.t64"), clip
            )
            count += 1
        print(f"dumped {count} clips to {args.dump_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(
        prog="sevnet",
        description="Grouped spatio-temporal 3D convnets: analysis, "
                    "verification, and training.",
        epilog="config file keys (flat 'key = value' lines):\n"
               + describe_keys(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze",
                       help="print per-layer parameter/MAC report")
    p.add_argument("--config", help="run config file (network section used)")
    p.add_argument("--variant", default="sev",
                   choices=["sev", "r2plus1d", "r3d"])
    p.add_argument("--group-width", type=int, default=8)
    p.add_argument("--classes", type=int, default=174)
    p.add_argument("--frames", type=int, default=16)
    p.add_argument("--size", default="224", help="input size, N or HxW")
    p.add_argument("--se", action="store_true", help="add channel gates")
    p.add_argument("--se-reduction", type=int, default=4)
    p.add_argument("--out", help="also write the text report here")
    p.add_argument("--json", help="also write a JSON report here")
    p.add_argument("--golden", nargs="+",
                   help="golden files to check; exit 3 on breach")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("gradcheck",
                       help="finite-difference checks for every primitive")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sizes", default="tiny", choices=sorted(SIZE_PRESETS),
                   help="shapes per op preset")
    p.add_argument("--ops", help="comma-separated subset of ops")
    p.add_argument("--sabotage-op", help="test hook: corrupt this op's "
                                         "reverse-mode result")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train", help="train on the configured dataset")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="eval",
                   choices=["train", "eval", "test"])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="write a synthetic dataset manifest")
    p.add_argument("--spec", required=True, help="run config file")
    p.add_argument("--out", required=True, help="manifest path")
    p.add_argument("--dump-dir", help="export clips as tensor dumps")
    p.add_argument("--dump-count", type=int, default=4)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as exc:  # anything else is a runtime failure
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
