"""``dlcaps`` command line: train, eval, params, gradcheck, bench.

Exit codes: 0 ok, 1 check failure, 2 config error, 3 data error,
4 checkpoint error.
"""

from __future__ import annotations

import argparse
import csv
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import config as C
from . import tensor as T
from .checkpoint import load_checkpoint
from .errors import CheckpointError, ConfigurationError, FormatError, UsageError
from .model import build_model, class_probabilities, ensemble_predict
from .run import RunConfig, load_data, load_run_config, run_training
from .training import accuracy, output_lengths, per_class_accuracy

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_DATA, EXIT_CHECKPOINT = 0, 1, 2, 3, 4


def _parse_overrides(extra: list[str]) -> dict[str, str]:
    out: dict[str, str] = {}
    i = 0
    while i < len(extra):
        token = extra[i]
        if not token.startswith("--"):
            raise ConfigurationError(f"unexpected argument {token!r}")
        if "=" in token:
            key, value = token[2:].split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigurationError(f"missing value for {token}")
            key, value = token[2:], extra[i + 1]
            i += 2
        out[key] = value
    return out


def _resolve(args, extra) -> RunConfig:
    cfg = load_run_config(args.config, _parse_overrides(extra))
    print("# resolved config")
    for line in C.dumps(cfg).splitlines():
        print(f"#   {line}")
    return cfg


def cmd_train(args, extra) -> int:
    cfg = _resolve(args, extra)
    print(f"# run_dir {cfg.run_dir}")
    print("epoch,phase,lr,train_loss,train_acc,val_acc,seconds")
    run_training(cfg)
    return EXIT_OK


def cmd_eval(args, extra) -> int:
    cfg = _resolve(args, extra)
    models = []
    for path in args.checkpoint:
        try:
            models.append(load_checkpoint(path))
        except (FormatError, ConfigurationError) as exc:
            raise CheckpointError(str(exc)) from exc
    ref = models[0].cfg
    for path, m in zip(args.checkpoint, models):
        if m.cfg.num_classes != ref.num_classes or m.cfg.input_shape != ref.input_shape:
            raise CheckpointError(
                f"{path}: {m.cfg.num_classes} classes / input {m.cfg.input_shape} is incompatible with "
                f"{args.checkpoint[0]}: {ref.num_classes} classes / input {ref.input_shape}"
            )
    _, val = load_data(cfg)
    if val.images.shape[1:] != tuple(ref.input_shape) or val.num_classes != ref.num_classes:
        raise CheckpointError(
            f"checkpoint expects {ref.input_shape} inputs and {ref.num_classes} classes, dataset has "
            f"{val.images.shape[1:]} and {val.num_classes}"
        )
    probs = [class_probabilities(output_lengths(m, val.images)) for m in models]
    pred = ensemble_predict(probs)
    print(f"members {len(models)}")
    print(f"accuracy {accuracy(pred, val.labels):.6f}")
    for k, acc in enumerate(per_class_accuracy(pred, val.labels, ref.num_classes)):
        print(f"class {k} {acc:.6f}")
    return EXIT_OK


def cmd_params(args, extra) -> int:
    cfg = _resolve(args, extra)
    model = build_model(cfg.model)
    rows = model.param_table()
    for name, count in rows:
        print(f"{name:16s} {count:>10d}")
    total = model.count_params()
    print(f"{'total':16s} {total:>10d}")
    return EXIT_OK


def cmd_gradcheck(args, extra) -> int:
    from .gradcheck import run_model_check, run_ops_suite

    start = time.perf_counter()
    results = run_ops_suite() if args.scope == "ops" else [run_model_check()]
    failed = [r for r in results if not r.passed]
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{status:4s} {r.name:24s} {r.error:.3e} (tol {r.tolerance:g})")
    worst = max(results, key=lambda r: r.error / r.tolerance)
    print(f"worst {worst.name} {worst.error:.3e}")
    print(f"elapsed {time.perf_counter() - start:.1f}s")
    if failed:
        for r in failed:
            print(f"gradient check failed: {r.name} error {r.error:.3e}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def _median_latency(model, batch_size: int, runs: int, warmup: int, rng) -> float:
    x = rng.uniform(0, 1, (batch_size,) + tuple(model.cfg.input_shape))
    times = []
    with T.no_grad():
        for i in range(warmup + runs):
            start = time.perf_counter()
            model(x)
            if i >= warmup:
                times.append(time.perf_counter() - start)
    return statistics.median(times) / batch_size


def cmd_bench(args, extra) -> int:
    cfg = _resolve(args, extra)
    sizes = [int(s) for s in args.batch_sizes.split(",") if s.strip()]
    model = build_model(cfg.model)
    mlce = model.mlce
    summarized = mlce.level_caps
    raw = tuple(s[0] * s[1] * s[2] for s in mlce.cell_shapes)
    print(f"dr_input_caps with_capssum {sum(summarized)} without_capssum {sum(raw)}")
    rows = []
    rng = np.random.default_rng(cfg.seed)
    for bs in sizes:
        per_image = _median_latency(model, bs, args.runs, args.warmup, rng)
        rows.append((bs, per_image * 1e3))
        print(f"batch {bs:4d} per_image_ms {per_image * 1e3:.3f}")
    run_dir = Path(cfg.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    with (run_dir / "bench.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["batch_size", "per_image_ms", "dr_caps_with_capssum", "dr_caps_without_capssum"])
        for bs, ms in rows:
            w.writerow([bs, f"{ms:.4f}", sum(summarized), sum(raw)])
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dlcaps", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="two-phase hard training")
    p.add_argument("--config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy of one checkpoint or a softmax-mean ensemble")
    p.add_argument("--config")
    p.add_argument("--checkpoint", nargs="+", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("params", help="per-layer parameter counts")
    p.add_argument("--config")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("gradcheck", help="float64 finite-difference gradient checks")
    p.add_argument("scope", choices=["ops", "model"])
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="forward latency per batch size and capsule counts")
    p.add_argument("--config")
    p.add_argument("--batch-sizes", default="1,32")
    p.add_argument("--runs", type=int, default=20)
    p.add_argument("--warmup", type=int, default=3)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        if args.command == "gradcheck" and extra:
            raise ConfigurationError(f"gradcheck takes no overrides: {extra}")
        return args.func(args, extra)
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (ConfigurationError, UsageError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, FormatError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
