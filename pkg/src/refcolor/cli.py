"""Command-line entry point: ``refcolor {gen-data,train,sample,eval}``.

Exit codes: 0 success, 2 usage or invalid input, 3 checkpoint provenance
error, 4 file I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .checkpoint import Checkpoint, ProvenanceError
from .config import MODEL_KEYS, SCHEDULE_KEYS, ConfigError, dump_config, load_config, resolve
from .datagen import generate_triples, load_png, read_dataset, save_png, write_dataset
from .evaluation import METRICS, colorize_pairs, evaluate, make_pairs, protocol_notes
from .inference import MODES, InferenceRequest, colorize
from .injection import Thresholds
from .training import run_stage

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_PROVENANCE = 3
EXIT_IO = 4


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _echo_path(out: Path) -> Path:
    return out.with_name(out.name + ".config.txt")


def write_echo(path: Path, command: str, values: dict) -> None:
    body = dump_config({"command": command, "version": __version__, **values})
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(body, encoding="utf-8")


def _args_dict(args) -> dict:
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()
            if k not in ("func", "command") and v is not None}


def _load_checkpoint(path: Path) -> Checkpoint:
    if not path.is_file():
        raise CliError(EXIT_IO, f"checkpoint not found: {path}")
    try:
        return Checkpoint.load(path)
    except (OSError, ValueError, RuntimeError) as exc:
        raise CliError(EXIT_IO, f"cannot read checkpoint {path}: {exc}") from exc


def _read_png(path: Path | None, channels: int):
    if path is None:
        return None
    if not path.is_file():
        raise CliError(EXIT_IO, f"image not found: {path}")
    try:
        return load_png(path, channels)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read image {path}: {exc}") from exc


# -- commands --------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    if args.count < 0:
        raise CliError(EXIT_USAGE, "--count must be >= 0")
    triples = generate_triples(args.count, args.seed, args.image_size)
    manifest = write_dataset(triples, args.out)
    write_echo(args.out / "gen-data.config.txt", "gen-data", _args_dict(args))
    print(f"wrote {len(triples)} triples to {manifest}")
    return EXIT_OK


def cmd_train(args) -> int:
    raw = load_config(args.config) if args.config is not None else {}
    model_cfg, schedule, stage_cfg = resolve(raw, args.stage)
    ckpt_in = _load_checkpoint(args.ckpt_in) if args.ckpt_in is not None else None
    if ckpt_in is not None:
        given = {k.split(".")[-1] for k in raw} & (MODEL_KEYS | SCHEDULE_KEYS)
        if given and (ckpt_in.config != model_cfg or ckpt_in.schedule != schedule):
            raise CliError(EXIT_USAGE, "config model/schedule keys disagree with the input checkpoint")
    if not (args.data / "manifest.jsonl").is_file():
        raise CliError(EXIT_IO, f"no manifest.jsonl in {args.data}")
    dataset = read_dataset(args.data)
    out = run_stage(stage_cfg, dataset, ckpt_in, log=print, model_config=model_cfg, schedule=schedule)
    out.save(args.ckpt_out)
    resolved = {f"stage.{k}": getattr(stage_cfg, k) for k in stage_cfg.field_names()}
    resolved.update({f"model.{k}": v for k, v in out.config.to_dict().items()})
    resolved.update({f"schedule.{k}": v for k, v in out.schedule.to_dict().items()})
    write_echo(_echo_path(args.ckpt_out), "train", {**_args_dict(args), **resolved})
    print(f"stages completed: {', '.join(out.stages)}; checkpoint written to {args.ckpt_out}")
    return EXIT_OK


def cmd_sample(args) -> int:
    ckpt = _load_checkpoint(args.ckpt)
    req = InferenceRequest(
        sketch=_read_png(args.sketch, 1),
        reference=_read_png(args.reference, 3),
        sketch_mask=_read_png(args.sketch_mask, 1),
        reference_mask=_read_png(args.reference_mask, 1),
        mode=args.mode,
        thresholds=Thresholds(args.ts_s, args.ts_r),
        guidance=args.guidance,
        steps=args.steps,
        seed=args.seed,
        second_order=args.second_order,
    )
    image = colorize(req, ckpt)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_png(image, args.out)
    write_echo(_echo_path(args.out), "sample", _args_dict(args))
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    bad = [m for m in metrics if m not in METRICS]
    if bad or not metrics:
        raise CliError(EXIT_USAGE, f"--metrics must be a comma-separated subset of {', '.join(METRICS)}")
    if args.ckpt is None and args.results is None:
        raise CliError(EXIT_USAGE, "eval needs --ckpt or --results")
    if "embed_cosine" in metrics and args.ckpt is None:
        raise CliError(EXIT_USAGE, "embed_cosine needs --ckpt for the frozen embedder")
    if not (args.data / "manifest.jsonl").is_file():
        raise CliError(EXIT_IO, f"no manifest.jsonl in {args.data}")
    triples = read_dataset(args.data)
    pairs = make_pairs(triples, args.tps, args.seed, args.tps_magnitude)
    ckpt = _load_checkpoint(args.ckpt) if args.ckpt is not None else None
    if args.results is not None:
        results = [_read_png(args.results / f"{p.id}.png", 3) for p in pairs]
    else:
        results = colorize_pairs(pairs, ckpt, args.mode, steps=args.steps, guidance=args.guidance,
                                 seed=args.seed, thresholds=Thresholds(args.ts_s, args.ts_r))
    if args.save_images is not None:
        args.save_images.mkdir(parents=True, exist_ok=True)
        for p, img in zip(pairs, results):
            save_png(img, args.save_images / f"{p.id}.png")
    embedder = ckpt.model.embedder if "embed_cosine" in metrics else None
    records = evaluate(results, pairs, metrics, embedder)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records), encoding="utf-8")
    size = triples[0].color.shape[-1] if triples else 0
    notes = protocol_notes(size) if size >= 16 else {}
    write_echo(_echo_path(args.out), "eval", {**_args_dict(args), **notes})
    for r in records[len(records) - len(metrics):]:
        print(f"{r['metric']}: mean {r['value']} over {r['n']} items")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------


def _add_sampling_flags(p):
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--guidance", type=float, default=3.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ts-s", dest="ts_s", type=float, default=0.5)
    p.add_argument("--ts-r", dest="ts_r", type=float, default=0.5)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="refcolor", description="Reference-based sketch colorization.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", dest="image_size", type=int, default=64)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--stage", choices=["0", "1a", "1b", "2", "3"], required=True)
    p.add_argument("--config", type=Path)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--ckpt-in", dest="ckpt_in", type=Path)
    p.add_argument("--ckpt-out", dest="ckpt_out", type=Path, required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="colorize one sketch")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--mode", choices=MODES, default="vanilla")
    p.add_argument("--sketch", type=Path, required=True)
    p.add_argument("--reference", type=Path, required=True)
    p.add_argument("--sketch-mask", dest="sketch_mask", type=Path)
    p.add_argument("--reference-mask", dest="reference_mask", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--second-order", dest="second_order", action="store_true")
    _add_sampling_flags(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="colorize a dataset and write a metric report")
    p.add_argument("--ckpt", type=Path)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--mode", choices=MODES, default="vanilla")
    p.add_argument("--metrics", default="psnr,ms_ssim")
    p.add_argument("--tps", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--tps-magnitude", dest="tps_magnitude", type=float, default=3.0,
                   help="maximum control-point displacement in pixels; 0 gives the identity warp")
    p.add_argument("--results", type=Path, help="score existing <id>.png images instead of colorizing")
    p.add_argument("--save-images", dest="save_images", type=Path)
    p.add_argument("--out", type=Path, required=True)
    _add_sampling_flags(p)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ProvenanceError as exc:
        print(f"provenance error: {exc}", file=sys.stderr)
        return EXIT_PROVENANCE
    except (ConfigError, ValueError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
