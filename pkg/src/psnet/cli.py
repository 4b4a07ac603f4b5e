"""Command line: ``psnet {gen-data,train,caption,eval,gradcheck}``.

Exit codes: 0 success, 1 runtime or data failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .data import SceneConfig, census, decode_caption, generate_dataset, iter_dataset, normalize, read_dataset, sample_from_record, write_dataset
from .errors import PsNetError, SchemaError
from .metrics import METRIC_ORDER
from .model import ModelConfig, generate_caption
from .train import TrainConfig, load_checkpoint, params_from_checkpoint, train

log = logging.getLogger("psnet")

REFERENCE = "(reference value)"


def positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def positive_float(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}")
    if not value > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {value}")
    return value


def _write_manifest(path: Path, command: str, seed: int, **sections) -> None:
    manifest = {"command": command, "tool_version": __version__, "seed": seed, **sections}
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    scene = SceneConfig(
        image_size=args.image_size,
        noise=args.noise,
        captions_per_sample=args.captions_per_sample,
        max_persistent=args.max_persistent,
    )
    samples = generate_dataset(args.seed, args.count, scene)
    out = Path(args.out)
    write_dataset(samples, out)
    _write_manifest(
        Path(str(out) + ".manifest.json"), "gen-data", args.seed,
        scene_config=scene.to_dict(), count=args.count, paths={"dataset": str(out)},
    )
    if args.census:
        for kind, n in census(samples).items():
            print(f"{kind}\t{n}")
    return 0


def _model_config(args, vocab_size: int, image_size: int) -> ModelConfig:
    return ModelConfig(
        image_size=image_size,
        patch=args.patch,
        width=args.width,
        heads=args.heads,
        pdp_layers=args.pdp_layers,
        sr_modules=args.sr_modules,
        decoder_layers=args.decoder_layers,
        vocab_size=vocab_size,
        max_len=args.max_len,
        precision=args.precision,
        variant=args.variant,
    )


def cmd_train(args) -> int:
    from .data import build_vocab

    samples = read_dataset(args.data)
    if not samples:
        raise SchemaError(f"{args.data}: dataset is empty")
    resume = load_checkpoint(args.resume) if args.resume else None
    if resume is not None:
        model_cfg = resume.model_config
        vocab_size = model_cfg.vocab_size
    else:
        vocab_size = len(build_vocab(c for s in samples for c in s.captions))
        model_cfg = _model_config(args, vocab_size, args.image_size)
    if samples[0].t1.shape[0] != model_cfg.image_size:
        raise SchemaError(f"image_size: dataset images are {samples[0].t1.shape[0]}, model expects {model_cfg.image_size}")
    train_cfg = TrainConfig(lr=args.lr, beta1=args.beta1, beta2=args.beta2, eps=args.adam_eps, epochs=args.epochs, seed=args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_manifest(
        out / "manifest.json", "train", args.seed,
        model_config=model_cfg.to_dict(), train_config=train_cfg.to_dict(),
        paths={"data": str(args.data), "out_dir": str(out), "resume": args.resume},
    )
    result = train(model_cfg, train_cfg, samples, out_dir=out, resume=resume, keep_every_epoch=args.keep_all)
    print(f"trained {len(result.losses)} epochs; final loss {result.losses[-1]:.6f}")
    return 0


def _load_pairs(args):
    if args.data:
        yield from iter_dataset(args.data)
    else:
        rec = json.loads(Path(args.pair).read_text(encoding="utf-8"))
        rec.setdefault("id", Path(args.pair).stem)
        rec.setdefault("captions", ["-"])
        rec.setdefault("change_record", {})
        yield sample_from_record(rec)


def cmd_caption(args) -> int:
    from .data import Vocabulary

    ckpt = load_checkpoint(args.checkpoint)
    params = params_from_checkpoint(ckpt)
    vocab = Vocabulary(ckpt.vocab)
    cfg = ckpt.model_config
    want = (cfg.image_size, cfg.image_size, cfg.channels)
    lines = []
    for s in _load_pairs(args):
        if s.t1.shape != want:
            raise SchemaError(f"image_size: sample {s.id} is {list(s.t1.shape)}, checkpoint expects {list(want)}")
        ids = generate_caption(s.t1, s.t2, params, args.max_len)
        lines.append(f"{s.id}\t{decode_caption(ids, vocab)}\n")
    text = "".join(lines)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def _read_predictions(path) -> dict[str, str]:
    preds = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        if "\t" not in line:
            raise SchemaError(f"{path}: line {lineno} is not 'id<TAB>caption'")
        sid, caption = line.split("\t", 1)
        preds[sid] = caption
    return preds


def cmd_eval(args) -> int:
    from .metrics import METRIC_ORDER, EvalCorpus, evaluate, format_report

    if args.predictions:
        preds = _read_predictions(args.predictions)
        hyps, refs = [], []
        for s in iter_dataset(args.data):
            if s.id not in preds:
                raise SchemaError(f"no prediction for sample id {s.id}")
            hyps.append(preds[s.id])
            refs.append(s.captions)
    else:
        hyps = Path(args.hyps).read_text(encoding="utf-8").splitlines()
        refs = [line.split("\t") for line in Path(args.refs).read_text(encoding="utf-8").splitlines()]
        if len(hyps) != len(refs):
            raise SchemaError(f"{len(hyps)} hypotheses but {len(refs)} reference lines")
    report = evaluate(EvalCorpus.from_strings(hyps, refs))
    wanted = METRIC_ORDER if not args.metrics else [m.strip() for m in args.metrics.split(",")]
    unknown = [m for m in wanted if m not in METRIC_ORDER]
    if unknown:
        raise SchemaError(f"unknown metric(s) {unknown}; choose from {list(METRIC_ORDER)}")
    text = format_report({k: v for k, v in report.items() if k in wanted})
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    return 0


def cmd_gradcheck(args) -> int:
    import dataclasses

    from .gradcheck import REDUCED, run_gradcheck

    cfg = dataclasses.replace(REDUCED, width=args.width, heads=args.heads, vocab_size=args.vocab_size)
    reports = run_gradcheck(cfg, seed=args.seed, tol=args.tol, eps=args.eps, coords_per_tensor=args.coords, fault_op=args.fault_op)
    for r in reports:
        print(r.line())
    failed = [r for r in reports if not r.passed]
    if failed:
        worst = max(failed, key=lambda r: r.max_error)
        print(
            f"FAILED {', '.join(r.block for r in failed)}; worst block {worst.block}: "
            f"{worst.worst_tensor}[{worst.worst_index}] analytic {worst.analytic:.6e} "
            f"numeric {worst.numeric:.6e} relative error {worst.max_error:.3e}",
            file=sys.stderr,
        )
        return 1
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="psnet", description="Multi-scale change captioning for image pairs at desk scale.")
    parser.add_argument("--version", action="version", version=f"psnet {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, formatter_class=fmt)
        p.add_argument("--config", help="JSON run manifest supplying defaults; explicit flags win")
        p.add_argument("--threads", type=positive_int, default=1, help="BLAS threads")
        return p

    p = add("gen-data", "generate a synthetic bitemporal dataset (.jsonl)")
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--count", type=positive_int, required=True, help="number of samples")
    p.add_argument("--out", required=True, help="output .jsonl path")
    p.add_argument("--image-size", type=positive_int, default=32, help="image side in pixels")
    p.add_argument("--noise", type=float, default=0.02, help="uniform pixel noise amplitude (<= 0.02)")
    p.add_argument("--captions-per-sample", type=positive_int, default=5, help="references per sample (1-5)")
    p.add_argument("--max-persistent", type=int, default=3, help="maximum unchanged distractor objects")
    p.add_argument("--census", action="store_true", help="print per-change-type counts")
    p.set_defaults(func=cmd_gen_data)

    p = add("train", "train a model on a .jsonl dataset")
    p.add_argument("--data", required=True, help="training .jsonl")
    p.add_argument("--out-dir", required=True, help="directory for checkpoint.psnt, loss.log, manifest.json")
    p.add_argument("--epochs", type=positive_int, default=40, help=f"epochs to run {REFERENCE}")
    p.add_argument("--lr", type=positive_float, default=1e-4, help=f"Adam learning rate {REFERENCE}")
    p.add_argument("--beta1", type=float, default=0.9, help="Adam beta1")
    p.add_argument("--beta2", type=float, default=0.999, help="Adam beta2")
    p.add_argument("--adam-eps", type=positive_float, default=1e-8, help="Adam epsilon")
    p.add_argument("--pdp-layers", type=positive_int, default=3, help=f"difference perception layers {REFERENCE}")
    p.add_argument("--sr-modules", type=positive_int, default=3, help=f"scale-aware reinforcement modules {REFERENCE}")
    p.add_argument("--decoder-layers", type=positive_int, default=3, help=f"decoder layers {REFERENCE}")
    p.add_argument("--width", type=positive_int, default=64, help="model width C")
    p.add_argument("--heads", type=positive_int, default=4, help="attention heads")
    p.add_argument("--patch", type=positive_int, default=8, help="patch side in pixels")
    p.add_argument("--image-size", type=positive_int, default=32, help="expected image side in pixels")
    p.add_argument("--max-len", type=positive_int, default=16, help="maximum decoder length")
    p.add_argument("--precision", choices=["float32", "float64"], default="float32", help="training precision")
    p.add_argument("--variant", choices=["psnet", "pdp", "baseline"], default="psnet", help="architecture variant")
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--keep-all", action="store_true", help="also keep one checkpoint per epoch")
    p.set_defaults(func=cmd_train)

    p = add("caption", "greedy captions for every pair in a dataset or one pair file")
    p.add_argument("--checkpoint", required=True, help="trained .psnt checkpoint")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", help=".jsonl dataset")
    src.add_argument("--pair", help="JSON file with shape, t1, t2 (and optional id)")
    p.add_argument("--out", help="predictions file (default stdout)")
    p.add_argument("--max-len", type=positive_int, default=None, help="maximum generated tokens")
    p.set_defaults(func=cmd_caption)

    p = add("eval", "score predictions against references")
    p.add_argument("--predictions", help="'id<TAB>caption' lines (with --data)")
    p.add_argument("--data", help=".jsonl dataset holding the references")
    p.add_argument("--hyps", help="one hypothesis per line (with --refs)")
    p.add_argument("--refs", help="tab-separated references per line (with --hyps)")
    p.add_argument("--metrics", default=",".join(METRIC_ORDER), help="comma-separated subset of metrics")
    p.add_argument("--out", help="also write the report here")
    p.set_defaults(func=cmd_eval)

    p = add("gradcheck", "finite-difference check of every block in 64-bit")
    p.add_argument("--seed", type=int, default=0, help="seed for inputs and coordinate sampling")
    p.add_argument("--tol", type=positive_float, default=1e-4, help="maximum relative error")
    p.add_argument("--eps", type=positive_float, default=1e-5, help="central-difference step")
    p.add_argument("--coords", type=positive_int, default=8, help="sampled coordinates per tensor")
    p.add_argument("--width", type=positive_int, default=8, help="reduced model width")
    p.add_argument("--heads", type=positive_int, default=2, help="reduced head count")
    p.add_argument("--vocab-size", type=positive_int, default=11, help="reduced vocabulary size")
    p.add_argument("--fault-op", default=None, help="test hook: corrupt this op's adjoint (e.g. softmax)")
    p.set_defaults(func=cmd_gradcheck)
    return parser


_SECTIONS = ("model_config", "train_config", "scene_config", "paths")
_ALIASES = {"eps": "adam_eps"}


def _config_defaults(path: str, parser: argparse.ArgumentParser) -> dict:
    try:
        manifest = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        parser.error(f"--config: cannot read {path}: {exc}")
    flat = {k: v for k, v in manifest.items() if not isinstance(v, dict)}
    for section in _SECTIONS:
        for k, v in manifest.get(section, {}).items():
            flat[_ALIASES.get(k, k) if section == "train_config" else k] = v
    return flat


def _preload_config(parser: argparse.ArgumentParser, argv: list[str]) -> None:
    """Apply ``--config`` values as subcommand defaults before the real parse."""
    sub = parser._subparsers._group_actions[0].choices
    command = next((a for a in argv if a in sub), None)
    if command is None:
        return
    path = None
    for i, arg in enumerate(argv):
        if arg == "--config" and i + 1 < len(argv):
            path = argv[i + 1]
        elif arg.startswith("--config="):
            path = arg.split("=", 1)[1]
    if path is None:
        return
    target = sub[command]
    known = {a.dest for a in target._actions} - {"config", "help"}
    defaults = {k: v for k, v in _config_defaults(path, parser).items() if k in known}
    target.set_defaults(**defaults)
    for action in target._actions:
        if action.dest in defaults:
            action.required = False


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    _preload_config(parser, argv)
    args = parser.parse_args(argv)
    if args.command == "eval" and not ((args.predictions and args.data) or (args.hyps and args.refs)):
        parser.error("eval needs --predictions with --data, or --hyps with --refs")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(args.threads):
            return args.func(args)
    except (PsNetError, OSError, json.JSONDecodeError) as exc:
        print(f"psnet {args.command}: error: {exc}", file=sys.stderr)
        return 1
