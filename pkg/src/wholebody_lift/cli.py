"""Command line entry point: synth, convert-h3wb, train, eval, gradcheck, report.

Exit status: 0 success, 2 usage error, 3 invalid input (missing files, bad
config, malformed data, checkpoint mismatch), 4 runtime failure (including
failed gradient checks and non-finite training loss).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml

from wholebody_lift.data import ANY_SPLIT, H3WB_TEST, H3WB_TRAIN, CameraSpec, DataError, convert_h3wb, load_dataset
from wholebody_lift.data import save_dataset, synthesize
from wholebody_lift.features import FeatureError
from wholebody_lift.metrics import MetricReport, evaluate, format_table
from wholebody_lift.skeleton import TopologyError, default_topology, load_topology
from wholebody_lift.trainer import CheckpointMismatch, ConfigError, NonFiniteLoss, TrainConfig, evaluate_with_tta, train

log = logging.getLogger("wholebody_lift")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INVALID = 3
EXIT_RUNTIME = 4

SPLITS = {"train": H3WB_TRAIN, "test": H3WB_TEST, "all": ANY_SPLIT}


class InputError(ValueError):
    """Bad user input detected by the CLI itself."""


def _topology(args):
    return load_topology(args.topology) if args.topology else default_topology()


def _require_file(path: Optional[str], what: str) -> Path:
    if not path:
        raise InputError(f"{what} is required")
    p = Path(path)
    if not p.exists():
        raise InputError(f"{what} {p} does not exist")
    return p


def cmd_synth(args) -> int:
    topo = _topology(args)
    camera = CameraSpec.parse(args.camera)
    ds, extras = synthesize(args.n, args.seed, camera, topo)
    path = save_dataset(ds, args.out, extras)
    print(f"wrote {len(ds)} samples to {path}")
    return EXIT_OK


def cmd_convert(args) -> int:
    src = _require_file(args.input, "--in")
    paths = convert_h3wb(src, args.out, units_3d=args.units)
    for p in paths:
        print(f"wrote {p}")
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    doc = {}
    if args.config:
        doc = yaml.safe_load(_require_file(args.config, "--config").read_text()) or {}
        if not isinstance(doc, dict):
            raise ConfigError(f"{args.config}: config must be a mapping")
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.epochs is not None:
        doc["epochs"] = args.epochs
    doc["checkpoint_dir"] = args.out
    return TrainConfig.from_dict(doc)


def cmd_train(args) -> int:
    topo = _topology(args)
    cfg = _train_config(args)
    ds = load_dataset(_require_file(args.data, "--data"), SPLITS[args.split])
    eval_ds = load_dataset(_require_file(args.eval_data, "--eval-data"), SPLITS["all"]) if args.eval_data else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
    result = train(cfg, ds, topo, eval_dataset=eval_ds, max_steps=args.max_steps)
    last = result.log[-1]
    print(f"{len(result.log)} steps, final total loss {last['total']:.4f}; checkpoint {result.checkpoint}")
    return EXIT_OK


def _load_predictions(path: Path, ids: list[str]) -> np.ndarray:
    if path.suffix == ".npy":
        preds = np.load(path)
    else:
        doc = json.loads(path.read_text())
        if isinstance(doc, dict):
            missing = [sid for sid in ids if sid not in doc]
            if missing:
                raise InputError(f"{path}: no prediction for {len(missing)} samples, e.g. {missing[0]!r}")
            preds = np.asarray([doc[sid] for sid in ids], dtype=np.float64)
        else:
            preds = np.asarray(doc, dtype=np.float64)
    if preds.shape[0] != len(ids):
        raise InputError(f"{path}: {preds.shape[0]} predictions for {len(ids)} samples")
    return preds


def cmd_eval(args) -> int:
    topo = _topology(args)
    ds = load_dataset(_require_file(args.data, "--data"), SPLITS[args.split])
    if args.pred:
        preds = _load_predictions(_require_file(args.pred, "--pred"), ds.ids)
        report = evaluate(preds, ds.joints_3d(), topo)
    else:
        report, preds = evaluate_with_tta(_require_file(args.ckpt, "--ckpt"), ds, topo, tta=args.tta)
    method = args.method or ("Proposed + TTA" if args.tta else "Proposed")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(report.to_json(method=method))
    np.save(out / "predictions.npy", np.asarray(preds, dtype=np.float64))
    print(report.to_table(method), end="")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from wholebody_lift.gradcheck import run_all

    topo = _topology(args)
    model_cfg = TrainConfig.from_file(_require_file(args.config, "--config")).model if args.config else None
    results = run_all(topo, model_cfg, seed=args.seed or 0)
    lines = [r.line() for r in results]
    for line in lines:
        print(line)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "gradcheck.txt").write_text("\n".join(lines) + "\n")
    failed = [r.name for r in results if not r.passed]
    if failed:
        log.error("gradient check failed for: %s", ", ".join(failed))
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_report(args) -> int:
    rows = []
    for name in args.reports:
        path = _require_file(name, "report")
        try:
            doc = json.loads(path.read_text())
            rows.append((doc.get("method", path.stem), MetricReport.from_dict(doc)))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise InputError(f"{path}: not a metric report ({e})") from e
    table = format_table(rows)
    print(table, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "table.txt").write_text(table)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wholebody-lift", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def common(p, topology=True):
        if topology:
            p.add_argument("--topology", help="skeleton topology JSON (default: bundled COCO-WholeBody)")
        return p

    p = common(sub.add_parser("synth", help="generate a synthetic dataset"))
    p.add_argument("--n", type=int, default=1000, help="number of samples")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--camera", default=None, help="camera overrides, e.g. 'focal=1145,width=1000,height=1000'")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("convert-h3wb", help="convert H3WB release files to the internal format")
    p.add_argument("--in", dest="input", required=True, help="directory with the upstream JSON files")
    p.add_argument("--out", required=True)
    p.add_argument("--units", choices=("mm", "m"), default="mm", help="units of the upstream 3D keypoints")
    p.set_defaults(func=cmd_convert)

    p = common(sub.add_parser("train", help="train a model"))
    p.add_argument("--config", help="YAML run config (fields of TrainConfig)")
    p.add_argument("--data", required=True, help="training data directory")
    p.add_argument("--split", choices=sorted(SPLITS), default="all")
    p.add_argument("--eval-data", help="optional data evaluated every eval_interval epochs")
    p.add_argument("--out", required=True, help="checkpoint and log directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--max-steps", type=int, default=None, help="stop after this many updates")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("eval", help="evaluate a checkpoint or a predictions file"))
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--ckpt", help="model checkpoint")
    source.add_argument("--pred", help="predictions (.npy in dataset order, or JSON keyed by sample id)")
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=sorted(SPLITS), default="all")
    p.add_argument("--tta", action="store_true", help="average with the horizontally flipped prediction")
    p.add_argument("--method", default=None, help="method name stored in the report")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser("gradcheck", help="finite-difference gradient checks"))
    p.add_argument("--config", help="YAML run config; its model section is checked")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", help="render metric reports as a comparison table")
    p.add_argument("reports", nargs="+", help="metrics.json files")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except NonFiniteLoss as e:
        log.error("%s", e)
        return EXIT_RUNTIME
    except (InputError, ConfigError, DataError, TopologyError, FeatureError, CheckpointMismatch, FileNotFoundError) as e:
        log.error("%s", e)
        return EXIT_INVALID
    except ValueError as e:
        log.error("invalid input: %s", e)
        return EXIT_INVALID
    except Exception as e:  # noqa: BLE001
        log.exception("failed: %s", e)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
