"""``dynaguide`` command line: segment, eval, synth, gradcheck, info.

Exit codes: 0 success, 1 input error, 2 internal invariant failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import gradcheck as gc
from . import tensor as T
from .config import RunConfig, load_config
from .evaluation import evaluate, evaluate_multi
from .exceptions import ConfigurationError, InputError, InvariantError
from .imageio import (atomic_write, load_image, load_labels, save_image, save_label_png,
                      save_labels)
from .network import init_params, parameter_count
from .synthetic import CorruptionSpec, SceneSpec, corrupt_labels, generate_scene
from .trainer import refine

EXIT_OK, EXIT_INPUT, EXIT_INTERNAL = 0, 1, 2
SEED_ENV = "DYNAGUIDE_SEED"

logger = logging.getLogger("dynaguide")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _write_json(path: Path, payload) -> None:
    atomic_write(path, (json.dumps(payload, indent=2, sort_keys=True) + "\n").encode())


def _metrics(pred, gts) -> dict:
    if len(gts) == 1:
        return evaluate(pred, gts[0]).to_dict()
    return evaluate_multi(pred, gts).to_dict()


def _resolve_config(args) -> RunConfig:
    overrides = dict(kv for kv in (args.set or []))
    if getattr(args, "iterations", None) is not None:
        overrides["iterations"] = args.iterations
    config = load_config(args.config, **overrides)
    seed = args.seed
    if seed is None and not _file_sets_seed(args.config) and os.environ.get(SEED_ENV):
        try:
            seed = int(os.environ[SEED_ENV])
        except ValueError:
            raise ConfigurationError(f"{SEED_ENV} must be an integer") from None
    return config if seed is None else config.replace(seed=seed)


def _file_sets_seed(path) -> bool:
    if path is None:
        return False
    from .config import parse_config_text

    return "seed" in parse_config_text(Path(path).read_text())


def _key_value(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    key, value = text.split("=", 1)
    return key.strip(), value.strip()


def _segment_one(image_path: str, pseudo_path: str, gt_paths: list[str], config: RunConfig,
                 out_dir: str, nan_at: int | None = None) -> dict:
    image = load_image(image_path)
    pseudo = load_labels(pseudo_path)
    if pseudo.shape != image.shape[1:]:
        raise InputError(f"pseudo-label map {pseudo.shape} does not match image "
                         f"{image.shape[1:]} ({pseudo_path})")
    gts = [load_labels(p) for p in gt_paths]
    for p, g in zip(gt_paths, gts):
        if g.shape != image.shape[1:]:
            raise InputError(f"ground truth {p} {g.shape} does not match image {image.shape[1:]}")

    params = init_params(config)
    callback = None
    if nan_at is not None:
        def callback(it, _breakdown):
            if it == nan_at:
                params["classifier.bias"].data[:] = np.nan

    labels, trace, _ = refine(image, pseudo, config, params=params, callback=callback)
    out = Path(out_dir)
    stem = Path(image_path).stem
    save_labels(labels, out / f"{stem}_labels.pgm")
    save_label_png(labels, out / f"{stem}_labels.png")
    atomic_write(out / f"{stem}_trace.csv", trace.to_csv().encode())
    summary = {"image": str(image_path), "iterations_run": len(trace),
               "stop_reason": trace.stop_reason, "q_active": int(np.unique(labels).size)}
    if gts:
        metrics = _metrics(labels, gts)
        _write_json(out / f"{stem}_metrics.json", metrics)
        summary["miou"] = metrics.get("miou", metrics.get("mean"))
    return summary


def cmd_segment(args) -> int:
    images, pseudos = args.image, args.pseudo
    if len(images) != len(pseudos):
        raise InputError("--image and --pseudo must be given the same number of times")
    if args.gt and len(images) > 1:
        raise InputError("--gt is only supported with a single --image")
    config = _resolve_config(args)
    Path(args.out).mkdir(parents=True, exist_ok=True)
    jobs = [(i, p, args.gt or [], config, args.out, args.inject_nan_at)
            for i, p in zip(images, pseudos)]
    if args.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            summaries = list(pool.map(_segment_one, *zip(*jobs)))
    else:
        summaries = [_segment_one(*job) for job in jobs]
    for s in summaries:
        print(json.dumps(s, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    pred = load_labels(args.pred)
    gts = [load_labels(p) for p in args.gt]
    print(json.dumps(_metrics(pred, gts), indent=2, sort_keys=True))
    return EXIT_OK


def _parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise ConfigurationError(f"--size must look like HxW, got {text!r}") from None
    return h, w


def _parse_corruption(text: str, seed: int) -> CorruptionSpec:
    if text == "none":
        return CorruptionSpec.none(seed)
    if text == "default":
        return CorruptionSpec(seed=seed)
    names = {"dilation": "boundary_dilation_px", "merge": "merge_fraction",
             "flip": "flip_fraction", "seed": "seed"}
    values = {"seed": seed}
    for part in text.split(","):
        key, _, value = part.partition("=")
        if key.strip() not in names or not value:
            raise ConfigurationError(
                f"bad --corrupt item {part!r}; use none, default or dilation=,merge=,flip=,seed=")
        field = names[key.strip()]
        values[field] = int(value) if field in ("boundary_dilation_px", "seed") else float(value)
    return CorruptionSpec(**values)


def cmd_synth(args) -> int:
    h, w = _parse_size(args.size)
    scene = SceneSpec(w, h, args.regions, args.noise, args.seed)
    corruption = _parse_corruption(args.corrupt, args.seed)
    image, gt = generate_scene(scene)
    pseudo = corrupt_labels(gt, corruption)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_image(image, out / "image.ppm")
    save_labels(gt, out / "gt.pgm")
    save_labels(pseudo, out / "pseudo.pgm")
    # score what was written so the manifest matches `eval` on the files
    report = evaluate(load_labels(out / "pseudo.pgm"), load_labels(out / "gt.pgm"))
    manifest = {"scene": scene.to_dict(), "corruption": corruption.to_dict(),
                "pseudo_miou": report.miou, "pseudo_pacc": report.pacc,
                "files": {"image": "image.ppm", "gt": "gt.pgm", "pseudo": "pseudo.pgm"}}
    _write_json(out / "manifest.json", manifest)
    print(json.dumps({"out": str(out), "pseudo_miou": report.miou}, sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seeds = range(args.seed, args.seed + args.seeds)
    worst: dict[str, float] = {}
    with T.inject_backward_fault(args.sabotage) if args.sabotage else nullcontext():
        for seed in seeds:
            report = gc.run(seed, composed_coords=args.coords)
            for r in report.results:
                worst[r.name] = max(worst.get(r.name, 0.0), r.max_rel_error)
    ok = True
    for name, err in worst.items():
        status = "PASS" if err <= gc.TOLERANCE else "FAIL"
        ok &= status == "PASS"
        print(f"{status} {name:<12} max_rel_err={err:.3e}")
    print(f"{'PASS' if ok else 'FAIL'} gradcheck seeds={len(seeds)} tolerance={gc.TOLERANCE:g}")
    return EXIT_OK if ok else EXIT_INTERNAL


def cmd_info(args) -> int:
    config = _resolve_config(args)
    for key, value in config.to_dict().items():
        print(f"{key} = {value}")
    print(f"parameter_count = {parameter_count(config)}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dynaguide", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def config_flags(p):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int, help=f"run seed (default: ${SEED_ENV} or 0)")
        p.add_argument("--set", action="append", type=_key_value, metavar="KEY=VALUE",
                       help="override one config key (repeatable)")

    p = sub.add_parser("segment", help="refine pseudo-labels for one or more images")
    p.add_argument("--image", action="append", required=True)
    p.add_argument("--pseudo", action="append", required=True)
    p.add_argument("--gt", action="append", help="ground-truth annotation (repeatable)")
    p.add_argument("--out", default=".")
    p.add_argument("--iterations", type=int)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--inject-nan-at", type=int, help=argparse.SUPPRESS)
    config_flags(p)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("eval", help="score a label map against one or more annotations")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", action="append", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="write a synthetic scene with corrupted pseudo-labels")
    p.add_argument("--regions", type=int, default=4)
    p.add_argument("--size", default="32x32", help="HxW")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--corrupt", default="default",
                   help="none | default | dilation=N,merge=F,flip=F")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds")
    p.add_argument("--coords", type=int, help="sample this many composed-loss coordinates")
    p.add_argument("--sabotage", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("info", help="print the resolved config and parameter count")
    config_flags(p)
    p.set_defaults(func=cmd_info)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InputError, ConfigurationError, OSError) as exc:
        print(f"dynaguide: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except InvariantError as exc:
        print(f"dynaguide: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
