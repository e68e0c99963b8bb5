"""Command-line entry point.

Every command writes ``resolved-config.json`` next to its outputs. Exit codes:
0 success, 1 validation or check failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from .checkpoint import CheckpointError, load_checkpoint, read_manifest, save_checkpoint
from .data import ATTRIBUTE_CSV, DatasetError
from .gradsuite import CASES, run_case
from .models import MAP, DAFFNet
from .schema import SchemaError
from .synth import HELDOUT_CSV, SynthConfig, synth_generate
from .training import LossWeights, TrainConfig, TrainingError
from . import pipeline

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# argument plumbing -------------------------------------------------------------
def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", help="JSON file of option values; explicit flags override it")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=out_required, help="output directory")
    p.add_argument("--threads", type=int, default=1, help="BLAS thread cap (default 1)")


def _training(p: argparse.ArgumentParser, epochs: int = 100) -> None:
    p.add_argument("--data", required=True, help="dataset root")
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=None, help="resize images on load")
    p.add_argument("--crop-size", type=int, default=56)
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-4)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="daffnet", description="Dual-branch white-blood-cell classifier")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="render a synthetic labelled cell dataset")
    _common(p)
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--attribute-noise", type=float, default=0.05)
    p.add_argument("--domain", default="a", help="background/noise style: a or b")
    p.add_argument("--withhold-attributes", action="store_true",
                   help=f"write attribute truth to {HELDOUT_CSV} so the set looks attribute-unlabelled")
    p.set_defaults(seed=7)

    p = sub.add_parser("train-map", help="train the attribute predictor")
    _common(p)
    _training(p)
    p.add_argument("--lambda-ap", type=float, default=0.8)
    p.add_argument("--lambda-cls", type=float, default=0.2)
    p.add_argument("--ablate-dsl", action="store_true", help="drop the auxiliary class term")
    p.add_argument("--pseudo-data", action="append", default=[],
                   help="extra dataset whose pseudo labels join training (repeatable)")
    p.add_argument("--pseudo-labels", action="append", default=[],
                   help="attributes.pseudo.csv for the matching --pseudo-data")

    p = sub.add_parser("pseudo-label", help="predict attributes for a dataset's training split")
    _common(p)
    p.add_argument("--checkpoint", required=True, help="MAP checkpoint directory")
    p.add_argument("--data", action="append", required=True, help="dataset root (repeatable)")
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=None)
    p.add_argument("--crop-size", type=int, default=56)

    p = sub.add_parser("train-daffnet", help="train the fused classifier")
    _common(p)
    _training(p)
    p.add_argument("--map-checkpoint", help="trained MAP checkpoint directory")
    for flag, what in (("--no-epsa", "EPSA blocks"), ("--no-sa", "spatial attention"),
                       ("--no-mfe", "morphological branch"), ("--no-mae", "attribute encoder")):
        p.add_argument(flag, action="store_true", help=f"disable the {what}")

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a dataset split")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=None)
    p.add_argument("--crop-size", type=int, default=56)

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer and block")
    _common(p, out_required=False)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--case", action="append", choices=sorted(CASES), help="run only these cases")

    p = sub.add_parser("ablation", help="train every ablation row over several seeds")
    _common(p)
    _training(p, epochs=30)
    p.add_argument("--map-checkpoint", required=True)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    return parser


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            values = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            parser.error(f"cannot read config {args.config}: {exc}")
        if not isinstance(values, dict):
            parser.error("config file must hold a JSON object")
        values = {k.replace("-", "_"): v for k, v in values.items()}
        unknown = sorted(k for k in values if k not in vars(args) or k in ("command", "config"))
        if unknown:
            parser.error(f"unknown config keys: {unknown}")
        # re-parse so explicit flags win over file values
        subparser = parser._subparsers._group_actions[0].choices[args.command]
        subparser.set_defaults(**values)
        args = parser.parse_args(argv)
    return args


def _resolved(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items())}


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _train_config(args, **extra) -> TrainConfig:
    return TrainConfig(epochs=args.epochs, patience=min(args.patience, args.epochs),
                       batch_size=args.batch_size, lr=args.lr, seed=args.seed,
                       crop_size=args.crop_size, **extra)


def _eval_config(args) -> TrainConfig:
    return TrainConfig(epochs=1, patience=0, seed=args.seed, crop_size=args.crop_size)


def _emit_report(out: Path, report) -> None:
    (out / "report.json").write_text(report.dumps(), encoding="utf-8")
    (out / "report.txt").write_text(report.to_text(), encoding="utf-8")
    if report.confusion:
        (out / "confusion.csv").write_text(report.confusion_csv(), encoding="utf-8")


def _load_map(path) -> MAP:
    model = load_checkpoint(path)
    if not isinstance(model, MAP):
        raise CheckpointError(f"{path} holds a {read_manifest(path)['kind']} checkpoint, not a MAP")
    return model


# commands ----------------------------------------------------------------------
def cmd_gen_synthetic(args) -> int:
    cfg = SynthConfig(image_size=args.image_size, per_class=args.per_class, seed=args.seed,
                      attribute_noise=args.attribute_noise, domain=args.domain)
    out = _out(args)
    manifest = synth_generate(cfg, out)
    if args.withhold_attributes:
        (out / ATTRIBUTE_CSV).replace(out / HELDOUT_CSV)
    _write_json(out / "resolved-config.json", _resolved(args))
    print(f"wrote {len(manifest)} images to {out}")
    return EXIT_OK


def cmd_train_map(args) -> int:
    if len(args.pseudo_data) != len(args.pseudo_labels):
        raise UsageError("--pseudo-data and --pseudo-labels must be given in matching pairs")
    if args.ablate_dsl:
        args.lambda_cls = 0.0
    out = _out(args)
    _write_json(out / "resolved-config.json", _resolved(args))
    w = LossWeights(args.lambda_ap, args.lambda_cls)
    cfg = _train_config(args)
    splits = pipeline.load_splits(args.data, args.split_seed, image_size=args.image_size)
    schema = splits.train.manifest.schema
    pseudo = [pipeline.pseudo_training_set(d, c, args.split_seed, schema, args.image_size)
              for d, c in zip(args.pseudo_data, args.pseudo_labels)]
    model, history = pipeline.fit_map(splits, cfg, w, pseudo)
    save_checkpoint(model, out / "checkpoint", seed=args.seed)
    _write_json(out / "history.json", history)
    _emit_report(out, pipeline.map_report(model, splits.test, cfg))
    print(f"best epoch {history['best_epoch']}: val_loss {history['best_value']:.4f}")
    return EXIT_OK


def cmd_pseudo_label(args) -> int:
    out = _out(args)
    _write_json(out / "resolved-config.json", _resolved(args))
    model = _load_map(args.checkpoint)
    cfg = _eval_config(args)
    names = [Path(d).resolve().name for d in args.data]
    for d, name in zip(args.data, names):
        target = out / name if len(args.data) > 1 else out
        path = pipeline.write_pseudo_labels(model, d, target, args.split_seed, cfg, args.image_size)
        print(f"wrote {path}")
    return EXIT_OK


def cmd_train_daffnet(args) -> int:
    mfe = "none" if args.no_mfe else ("map" if args.no_mae else "full")
    if mfe != "none" and not args.map_checkpoint:
        raise UsageError("--map-checkpoint is required unless --no-mfe is given")
    out = _out(args)
    _write_json(out / "resolved-config.json", _resolved(args))
    cfg = _train_config(args, freeze=("map.",))
    splits = pipeline.load_splits(args.data, args.split_seed, image_size=args.image_size)
    map_model = _load_map(args.map_checkpoint) if mfe != "none" else None
    net = pipeline.build_daffnet(splits.train.manifest.schema, args.seed, map_model, args.crop_size,
                                 len(splits.train.manifest.class_names), epsa=not args.no_epsa,
                                 sa=not args.no_sa, mfe=mfe)
    net, history = pipeline.train_daffnet(net, splits.train, splits.val, cfg)
    save_checkpoint(net, out / "checkpoint", seed=args.seed)
    _write_json(out / "history.json", history)
    _emit_report(out, pipeline.daffnet_report(net, splits.test, cfg))
    print(f"best epoch {history['best_epoch']}: val_accuracy {history['best_value']:.4f}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    out = _out(args)
    _write_json(out / "resolved-config.json", _resolved(args))
    model = load_checkpoint(args.checkpoint)
    cfg = _eval_config(args)
    schema = model.schema if isinstance(model, (MAP, DAFFNet)) else None
    data = getattr(pipeline.load_splits(args.data, args.split_seed, schema, image_size=args.image_size),
                   args.split)
    if isinstance(model, MAP):
        report = pipeline.map_report(model, data, cfg)
    elif isinstance(model, DAFFNet):
        report = pipeline.daffnet_report(model, data, cfg)
    else:
        raise CheckpointError("only MAP and DAFFNet checkpoints can be evaluated")
    _emit_report(out, report)
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = []
    failed = []
    for name in args.case or CASES:
        r = run_case(name, eps=args.eps, tol=args.tol, seed=args.seed)
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {name}: {r.report.summary()}")
        results.append({"case": name, "passed": r.passed, "max_rel_err": r.report.max_rel_err,
                        "checked": r.report.checked, "skipped": r.report.skipped})
        if not r.passed:
            failed.append(name)
    print(f"gradcheck tol={args.tol:g} eps={args.eps:g}: "
          + ("all passed" if not failed else f"FAILED: {', '.join(failed)}"))
    if args.out:
        out = _out(args)
        _write_json(out / "resolved-config.json", _resolved(args))
        _write_json(out / "report.json", {"tol": args.tol, "eps": args.eps, "cases": results})
    return EXIT_FAIL if failed else EXIT_OK


def cmd_ablation(args) -> int:
    out = _out(args)
    _write_json(out / "resolved-config.json", _resolved(args))
    cfg = _train_config(args, freeze=("map.",))
    splits = pipeline.load_splits(args.data, args.split_seed, image_size=args.image_size)
    table, per_row = pipeline.run_ablation(splits, _load_map(args.map_checkpoint), cfg, args.seeds)
    (out / "report.json").write_text(table.dumps(), encoding="utf-8")
    (out / "report.txt").write_text(table.to_text(), encoding="utf-8")
    _write_json(out / "runs.json", {name: [r.to_json() for r in reps] for name, reps in per_row.items()})
    print(table.to_text(), end="")
    return EXIT_OK


COMMANDS = {
    "gen-synthetic": cmd_gen_synthetic,
    "train-map": cmd_train_map,
    "pseudo-label": cmd_pseudo_label,
    "train-daffnet": cmd_train_daffnet,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
    "ablation": cmd_ablation,
}


def main(argv=None) -> int:
    try:
        args = parse_args(sys.argv[1:] if argv is None else argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        with threadpool_limits(limits=args.threads):
            return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, CheckpointError, SchemaError, TrainingError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
