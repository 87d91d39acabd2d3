"""``scanshare`` command line: synth, train, eval, account, render.

Every run writes one JSON manifest (arguments, inputs and outputs with
SHA-256 checksums, timestamps). ``--settings FILE`` supplies defaults from
a JSON object keyed by option name (``batch-size`` or ``batch_size``);
explicit flags win. Without ``--out`` results go to
``$SCANSHARE_OUT/<command>`` (``./scanshare-out`` if unset).

Exit codes: 0 success, 2 usage error, 1 any other failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import __version__
from .errors import ScanshareError, UsageError

log = logging.getLogger("scanshare")

STAGE_TAGS = {"fv": "fv", "vs-shared": "vs_shared", "vs-e2e": "vs_e2e"}
SPLITS = ("LS", "ES51", "ES42", "ES33", "ES24", "ES15")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _size(text: str) -> tuple[int, int]:
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WIDTHxHEIGHT, got {text!r}")
    return w, h


def _grid(text: str) -> tuple[int, int]:
    try:
        r, c = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected ROWSxCOLS, got {text!r}")
    return r, c


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _checksums(paths) -> dict[str, str]:
    out = {}
    for p in paths:
        p = Path(p)
        if p.is_dir():
            for f in sorted(p.rglob("*")):
                if f.is_file() and f.name != "manifest.json":
                    out[str(f)] = sha256_file(f)
        elif p.is_file():
            out[str(p)] = sha256_file(p)
    return out


def default_out(command: str) -> Path:
    return Path(os.environ.get("SCANSHARE_OUT", "scanshare-out")) / command


def write_manifest(path, args, inputs, outputs, started: float) -> Path:
    config = {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(args).items()
              if k not in ("func",) and not callable(v)}
    config = {k: (str(v) if isinstance(v, Path) else v) for k, v in config.items()}
    manifest = {
        "command": args.command,
        "argv": sys.argv[1:],
        "config": config,
        "seed": getattr(args, "seed", None),
        "version": __version__,
        "inputs": _checksums(inputs),
        "outputs": _checksums(outputs),
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _read_json(path) -> dict:
    from .errors import FormatError

    try:
        value = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(value, dict):
        raise FormatError(f"{path} must hold a JSON object")
    return value


def _out_dir(args) -> Path:
    out = Path(args.out) if args.out else default_out(args.command)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    from .data import save_dataset, synthesize

    if args.count < 1:
        raise UsageError("--count must be at least 1")
    out = _out_dir(args)
    pairs = synthesize(args.seed, args.count, args.grid, args.categories, args.size, args.fv_length)
    save_dataset(pairs, out / "fixations.jsonl", out / "images")
    n_fv = sum(sp.task.kind == "fv" for _, sp in pairs)
    print(f"wrote {args.count} images, {n_fv} fv and {len(pairs) - n_fv} vs scanpaths to {out}")
    write_manifest(out / "manifest.json", args, [], [out], args.started)
    return 0


def _load_split(args):
    from .data import load_dataset_dir, split_dataset

    pairs = load_dataset_dir(args.data)
    split = split_dataset(pairs, (0.8, 0.1, 0.1), args.split_seed)
    return split


def _train_config(args):
    from .training import TrainConfig

    return TrainConfig(learning_rate=args.lr, batch_size=args.batch_size, epochs=args.epochs,
                       weight_decay=args.weight_decay, seed=args.seed,
                       warm_start_suffix=not args.no_warm_start)


def _model_config(args, init=None):
    from .model import ModelConfig

    if init is not None:
        return ModelConfig.from_dict(init.model_config)
    base = {}
    if args.model_config:
        base = _read_json(args.model_config)
    if args.feature_dim is not None:
        base["feature_dim"] = args.feature_dim
    return ModelConfig(**base)


def _print_trainable(model, stage: str) -> None:
    from .model import partition_of
    from .training import trainable_names

    names = trainable_names(model, stage)
    parts = sorted({partition_of(n) for n in names})
    decoder = [n for n in names if partition_of(n).startswith("decoder_")]
    layers = sorted({n.split(".")[1] for n in decoder if n.split(".")[1].startswith("layer")})
    print(f"split {model.split.name}: {model.split.shared_layers} shared, "
          f"{model.split.task_layers} task-specific decoder layers")
    print(f"trainable partitions: {', '.join(parts)}")
    print(f"trainable parameters: {sum(model.params[n].data.size for n in names)}")
    print(f"pixel-decoder parameters trained: {sum(model.params[n].data.size for n in decoder)}")
    print(f"decoder layers trained: {len(layers)}")


def cmd_train(args) -> int:
    from .model import SplitConfig, build_model
    from .training import (load_checkpoint, save_checkpoint, train_end_to_end_vs, train_stage1_fv,
                           train_stage2_vs_shared)

    stage = STAGE_TAGS[args.stage]
    if stage != "fv" and not args.init:
        raise UsageError(f"--stage {args.stage} needs --init pointing to a free-viewing checkpoint")
    init = load_checkpoint(args.init) if args.init else None
    if init is not None and init.stage != "fv":
        raise UsageError(f"--init must be a free-viewing checkpoint, got stage {init.stage!r}")
    split = _load_split(args)
    model = build_model(_model_config(args, init), SplitConfig.from_name(args.split), args.seed)
    cfg = _train_config(args)
    _print_trainable(model, stage)
    on_epoch = lambda e, loss: print(f"epoch {e + 1}/{cfg.epochs} loss {loss:.6f}", flush=True)
    if stage == "fv":
        ckpt = train_stage1_fv(model, split.train, cfg, on_epoch)
    elif stage == "vs_shared":
        ckpt = train_stage2_vs_shared(model, init, split.train, cfg, on_epoch)
    else:
        ckpt = train_end_to_end_vs(model, split.train, cfg, init, on_epoch)
    out = _out_dir(args)
    path = out / "checkpoint.ckpt"
    save_checkpoint(ckpt, path)
    print(f"checkpoint: {path}")
    write_manifest(out / "manifest.json", args, [args.data] + ([args.init] if args.init else []), [path],
                   args.started)
    return 0


def cmd_eval(args) -> int:
    from .data import FREE_VIEWING
    from .metrics import (GroundTruthPredictor, ModelPredictor, build_density_baselines, evaluate,
                          format_report)
    from .training import load_checkpoint

    split = _load_split(args)
    subset = getattr(split, args.subset)
    if args.gt_as_prediction:
        predictor = GroundTruthPredictor(subset)
        method = args.method or "ground-truth"
    else:
        if not args.ckpt:
            raise UsageError("eval needs --ckpt unless --gt-as-prediction is given")
        model = load_checkpoint(args.ckpt).build_model()
        predictor = ModelPredictor(model, args.mode, args.seed)
        method = args.method or Path(args.ckpt).parent.name or "model"
    sample = subset[0][0] if subset else split.train[0][0]
    shape = (sample.height // 4, sample.width // 4)
    baselines = build_density_baselines([sp for _, sp in split.train], shape)
    report = evaluate(predictor, subset, args.task, baselines, method)
    if report.semss_missing:
        print("warning: segmentation missing; SemSS left empty", file=sys.stderr)
    text = format_report([report])
    out = _out_dir(args)
    (out / "report.csv").write_text(text)
    sys.stdout.write(text)
    write_manifest(out / "manifest.json", args, [args.data] + ([args.ckpt] if args.ckpt else []),
                   [out / "report.csv"], args.started)
    return 0


def cmd_account(args) -> int:
    from .accounting import (PUBLISHED_TABLE3, cost_report, late_split_from_table, load_table2,
                             split_sharing_report, table_totals)
    from .model import ModelConfig, SplitConfig, build_model
    from .training import load_checkpoint

    if bool(args.ckpt) == bool(args.config):
        raise UsageError("account needs exactly one of --ckpt or --config")
    if args.ckpt:
        ckpt = load_checkpoint(args.ckpt)
        model = ckpt.build_model()
        cfg = model.cfg
    else:
        cfg = ModelConfig(**_read_json(args.config))
        model = build_model(cfg, SplitConfig.from_name(args.split))
    out = _out_dir(args)
    costs = cost_report(model, args.input_size, "vs")
    sharing = split_sharing_report(cfg, args.input_size)
    outputs = [out / "costs.csv", out / "sharing.csv"]
    (out / "costs.csv").write_text(costs.to_text())
    (out / "sharing.csv").write_text(sharing.to_text())
    print(f"# per-module cost at {args.input_size[0]}x{args.input_size[1]}, split {model.split.name}")
    sys.stdout.write(costs.to_text())
    print("# sharing per split (measured)")
    sys.stdout.write(sharing.to_text())
    inputs = [p for p in (args.ckpt, args.config) if p]
    if args.table2:
        table = load_table2(args.table2)
        totals = table_totals(table)
        row = late_split_from_table(table).row("LS")
        published = PUBLISHED_TABLE3["LS"]
        lines = [
            "Quantity,Computed,Published",
            f"Total params (M),{totals.params_total},",
            f"Trainable params (M),{totals.params_trainable},",
            f"Total GFLOPS,{totals.flops_total},",
            f"Trainable-path GFLOPS,{totals.flops_trainable},",
            f"LS reduced trainable params (%),{row.params_pct},{published[0]}",
            f"LS shared FLOPs (%),{row.flops_pct},{published[1]}",
        ]
        text = "\n".join(lines) + "\n"
        (out / "table3_check.csv").write_text(text)
        outputs.append(out / "table3_check.csv")
        inputs.append(args.table2)
        print("# reproduction from the per-module cost table")
        sys.stdout.write(text)
    write_manifest(out / "manifest.json", args, inputs, outputs, args.started)
    return 0


def _parse_task(text: str):
    from .data import TaskSpec

    if text == "fv":
        return TaskSpec.free_viewing()
    if text.startswith("vs:"):
        return TaskSpec.search(int(text[3:]))
    raise UsageError(f"--task must be 'fv' or 'vs:<target>', got {text!r}")


def cmd_render(args) -> int:
    from .data import load_image, read_scanpaths
    from .render import render_scanpaths, save_overlay
    from .training import load_checkpoint

    task = _parse_task(args.task)
    image_path = Path(args.image)
    image_id = image_path.name[:-len(".ppm")] if image_path.name.endswith(".ppm") else image_path.stem
    sample = load_image(image_id, image_path.parent)
    model = load_checkpoint(args.ckpt).build_model()
    pred = model.rollout(sample, task, args.mode, args.seed)
    gt = None
    if args.gt:
        matches = [sp for sp in read_scanpaths(args.gt) if sp.image_id == image_id and sp.task == task]
        gt = matches[0] if matches else None
        if gt is None:
            print(f"warning: no ground truth for {image_id} / {args.task}", file=sys.stderr)
    canvas, _ = render_scanpaths(sample, pred, gt, args.scale)
    out = Path(args.out) if args.out else default_out("render") / f"{image_id}.png"
    save_overlay(canvas, out)
    print(f"prediction: {[(round(f.x, 4), round(f.y, 4)) for f in pred.fixations]} terminated={pred.terminated}")
    print(f"overlay: {out}")
    inputs = [args.ckpt, image_path] + ([args.gt] if args.gt else [])
    write_manifest(out.with_name(out.name + ".manifest.json"), args, inputs, [out], args.started)
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="scanshare", description="Shared-decoder scanpath prediction toolkit.")
    parser.add_argument("--version", action="version", version=f"scanshare {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    parser.add_argument("--settings", help="JSON file of option defaults; flags override it")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--grid", type=_grid, default=(3, 4), help="ROWSxCOLS shape layout")
    p.add_argument("--categories", type=int, default=4)
    p.add_argument("--size", type=_size, default=(128, 96), help="WIDTHxHEIGHT, multiples of 32")
    p.add_argument("--fv-length", type=int, default=None)
    p.add_argument("--out")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--stage", choices=list(STAGE_TAGS), required=True)
    p.add_argument("--split", choices=SPLITS, default="LS")
    p.add_argument("--data", required=True, help="dataset directory written by synth")
    p.add_argument("--init", help="free-viewing checkpoint (required for vs stages)")
    p.add_argument("--out")
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--no-warm-start", action="store_true",
                   help="keep the initial weights of task-specific decoder layers")
    p.add_argument("--feature-dim", type=int, default=None)
    p.add_argument("--model-config", help="JSON file of model options (fv stage)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split-seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint against ground truth")
    p.add_argument("--ckpt")
    p.add_argument("--data", required=True)
    p.add_argument("--task", choices=["fv", "vs"], required=True)
    p.add_argument("--out")
    p.add_argument("--subset", choices=["train", "val", "test"], default="test")
    p.add_argument("--gt-as-prediction", action="store_true")
    p.add_argument("--mode", choices=["argmax", "sample"], default="argmax")
    p.add_argument("--method", help="row label in the report")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split-seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("account", help="parameter/FLOP tables and sharing report")
    p.add_argument("--ckpt")
    p.add_argument("--config", help="JSON file of model options")
    p.add_argument("--split", choices=SPLITS, default="LS")
    p.add_argument("--input-size", type=_size, default=(128, 96))
    p.add_argument("--table2", help="CSV of published per-module costs")
    p.add_argument("--out")
    p.set_defaults(func=cmd_account)

    p = sub.add_parser("render", help="draw a predicted scanpath over an image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True, help="path to an <id>.ppm image")
    p.add_argument("--task", required=True, help="'fv' or 'vs:<target>'")
    p.add_argument("--gt", help="fixation file with the ground truth")
    p.add_argument("--out", help="output PNG path")
    p.add_argument("--mode", choices=["argmax", "sample"], default="argmax")
    p.add_argument("--scale", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_render)
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.settings:
        try:
            settings = json.loads(Path(args.settings).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read settings file {args.settings}: {exc}")
        if not isinstance(settings, dict):
            raise UsageError("settings file must hold a JSON object")
        settings = {k.lstrip("-").replace("-", "_"): v for k, v in settings.items()}
        subparser = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in subparser._actions}
        unknown = sorted(set(settings) - known)
        if unknown:
            raise UsageError(f"unknown settings for {args.command}: {unknown}")
        subparser.set_defaults(**settings)
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    started = time.time()
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"scanshare: usage error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args.started = started
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"scanshare: usage error: {exc}", file=sys.stderr)
        return 2
    except (ScanshareError, OSError, ValueError, KeyError) as exc:
        print(f"scanshare: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
