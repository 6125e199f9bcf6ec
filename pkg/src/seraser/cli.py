"""Command-line entry point: ``seraser {eval,gradcheck,toyworld,s2e}``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .backend import ToyWorldSpec, build_toy_world, create_backend
from .config import METHODS, RunConfig
from .errors import SEraserError
from .evaluation import evaluate, load_manifest, write_manifest, write_report
from .gradcheck import DEFAULT_TOLERANCE, run_gradcheck
from .images import ensure_dir, read_png, write_mask, write_png
from .plotting import plot_group_accuracy, write_group_csv
from .s2e import DEFAULT_THRESHOLD, build_dataset, create_client, load_pairs

WORLD_FILE = "world.json"


def _load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    cfg = RunConfig.load(path)
    cfg.resolve(Path(path).resolve().parent)
    return cfg


def _load_world(path):
    with open(path) as fh:
        return build_toy_world(ToyWorldSpec.from_dict(json.load(fh)))


def _resolve_world(cfg: RunConfig, cli_world, manifest_path):
    """--world, then model.world, then world.json beside the manifest, then the default spec."""
    for candidate in (cli_world, cfg.model.world):
        if candidate:
            return _load_world(candidate)
    if manifest_path is not None:
        sibling = Path(manifest_path).parent / WORLD_FILE
        if sibling.exists():
            return _load_world(sibling)
    return build_toy_world()


def _reference_pool(cfg: RunConfig, world):
    if cfg.eraser.reference_pool:
        return [read_png(p) for p in sorted(Path(cfg.eraser.reference_pool).glob("*.png"))]
    return world.reference_pool if world is not None else None


def cmd_eval(args) -> int:
    cfg = _load_config(args.config)
    cfg.apply_seed_env()
    if args.method is not None:
        cfg.eval.method = args.method
    if args.manifest is not None:
        cfg.eval.manifest = args.manifest
    if args.seed is not None:
        cfg.eval.seed = args.seed
    if args.parallelism is not None:
        cfg.eval.parallelism = args.parallelism
    if args.skip_errors:
        cfg.eval.skip_errors = True
    if args.strategies:
        cfg.eraser.strategies = list(args.strategies)
    if args.out is not None:
        cfg.output = args.out
    cfg.validate()
    if not cfg.eval.manifest:
        raise SEraserError("eval.manifest: no manifest given (use --manifest or the config file)")
    if not cfg.output:
        raise SEraserError("output: no report path given (use --out or the config file)")

    manifest = load_manifest(cfg.eval.manifest, cfg.model.labels)
    world = None
    if cfg.model.backend == "toy":
        world = _resolve_world(cfg, args.world, cfg.eval.manifest)
        model = world.model
    else:
        model = create_backend(cfg.model.backend)
    report = evaluate(cfg.eval.method, manifest, cfg, model, reference_pool=_reference_pool(cfg, world))

    out = Path(cfg.output)
    write_report(report, out)
    if not args.no_plot:
        write_group_csv([report], out.with_suffix(".csv"))
        plot_group_accuracy([report], out.with_suffix(".png"), title=report.method)
    print(f"method\t{report.method}")
    print(f"n\t{report.n}")
    print(f"AVG\t{report.avg_accuracy:.4f}")
    print(f"W.G.\t{report.worst_group_accuracy:.4f}")
    if report.errors:
        print(f"errors\t{len(report.errors)}")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _load_config(args.config)
    cfg.apply_seed_env()
    if args.seed is not None:
        cfg.eval.seed = args.seed
    if cfg.model.backend != "toy":
        # only the toy backend exposes closed-form prompt gradients
        model = create_backend(cfg.model.backend)
        if not model.provides_prompt_gradients:
            raise SEraserError(f"backend {cfg.model.backend!r} does not provide prompt gradients")
    world = _resolve_world(cfg, args.world, None)
    result = run_gradcheck(
        world,
        pairs=args.pairs,
        seed=cfg.eval.seed,
        tolerance=args.tolerance,
        config=cfg.eraser_config(),
        corrupt=args.corrupt_gradient,
    )
    print(f"pairs\t{len(result.errors)}")
    print(f"max_relative_error\t{result.max_error:.6e}")
    print(f"tolerance\t{result.tolerance:.1e}")
    print("PASS" if result.passed else "FAIL")
    return 0 if result.passed else 1


def cmd_toyworld(args) -> int:
    if args.spec is not None:
        with open(args.spec) as fh:
            data = json.load(fh)
    else:
        data = {}
    for key in ("num_classes", "num_backgrounds", "shortcut_strength", "correlation", "num_samples", "seed"):
        value = getattr(args, key)
        if value is not None:
            data[key] = value
    spec = ToyWorldSpec.from_dict(data)
    world = build_toy_world(spec)
    out = ensure_dir(args.out)
    ensure_dir(out / "images")
    ensure_dir(out / "masks")
    ensure_dir(out / "reference")
    records = []
    for s in world.samples:
        rec = {"id": s.id, "image": f"images/{s.id}.png", "label": s.label, "group": s.group, "mask": f"masks/{s.id}.png"}
        write_png(s.image, out / rec["image"])
        write_mask(s.mask, out / rec["mask"])
        records.append(rec)
    for i, x in enumerate(world.reference_pool):
        write_png(x, out / "reference" / f"ref_{i:03d}.png")
    write_manifest(records, out / "manifest.jsonl")
    with open(out / WORLD_FILE, "w") as fh:
        json.dump(spec.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"samples\t{len(records)}")
    print(f"groups\t{len(world.groups())}")
    print(f"manifest\t{out / 'manifest.jsonl'}")
    return 0


def cmd_s2e(args) -> int:
    pairs = load_pairs(args.pairs)
    client = create_client(args.client, pairs, seed=args.seed, decoy_fraction=args.decoy_fraction)
    result = build_dataset(pairs, client, args.out, args.count, args.threshold, seed=args.seed)
    for group in sorted(result.kept):
        print(f"{group}\tkept {result.kept[group]}\trejected {result.rejected[group]}")
    print(f"manifest\t{result.manifest}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="seraser", description=__doc__, formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("eval", help="evaluate a method on a grouped manifest", formatter_class=fmt)
    p.add_argument("--method", choices=METHODS, default=None, help="method (overrides eval.method; config default vanilla)")
    p.add_argument("--manifest", default=None, help="JSONL manifest (overrides eval.manifest)")
    p.add_argument("--config", default=None, help="JSON run config")
    p.add_argument("--out", default=None, help="report path; .csv and .png are written beside it")
    p.add_argument("--world", default=None, help="toy world spec JSON (default: world.json beside the manifest)")
    p.add_argument("--seed", type=int, default=None, help="overrides eval.seed and SERASER_SEED")
    p.add_argument("--parallelism", type=int, default=None, help="worker threads (overrides eval.parallelism)")
    p.add_argument("--skip-errors", action="store_true", help="record failing samples instead of aborting")
    p.add_argument("--strategies", nargs="+", default=None, help="auxiliary strategies for seraser")
    p.add_argument("--no-plot", action="store_true", help="skip the CSV and PNG outputs")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of prompt gradients", formatter_class=fmt)
    p.add_argument("--config", default=None, help="JSON run config")
    p.add_argument("--world", default=None, help="toy world spec JSON")
    p.add_argument("--pairs", type=int, default=50, help="number of (prompt, sample) pairs")
    p.add_argument("--seed", type=int, default=None, help="overrides eval.seed and SERASER_SEED")
    p.add_argument("--tolerance", type=float, default=DEFAULT_TOLERANCE, help="max relative error")
    p.add_argument("--corrupt-gradient", type=float, default=0.0, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("toyworld", help="write a toy world as PNGs and a manifest", formatter_class=fmt)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--spec", default=None, help="toy world spec JSON; flags below override it")
    p.add_argument("--num-classes", type=int, default=None, help="K (spec default 2)")
    p.add_argument("--num-backgrounds", type=int, default=None, help="B (spec default 2)")
    p.add_argument("--shortcut-strength", type=float, default=None, help="spec default 1.0")
    p.add_argument("--correlation", type=float, default=None, help="spec default 0.95")
    p.add_argument("--num-samples", type=int, default=None, help="spec default 400")
    p.add_argument("--seed", type=int, default=None, help="spec default 0")
    p.set_defaults(func=cmd_toyworld)

    p = sub.add_parser("s2e", help="shortcut-to-evaluate dataset construction", formatter_class=fmt)
    s2e_sub = p.add_subparsers(dest="s2e_command", required=True)
    b = s2e_sub.add_parser("build", help="swap contexts, generate, filter, emit a manifest", formatter_class=fmt)
    b.add_argument("--pairs", required=True, help="JSON list of class pairs")
    b.add_argument("--client", default="stub", help="'stub' or 'plugin:<name>'")
    b.add_argument("--count", type=int, default=25, help="images per swapped request")
    b.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD, help="presence probability cutoff (strict)")
    b.add_argument("--out", required=True, help="output directory")
    b.add_argument("--seed", type=int, default=0, help="generation and prompt seed")
    b.add_argument("--decoy-fraction", type=float, default=0.0, help="stub only: share of glyph-free images")
    b.set_defaults(func=cmd_s2e)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (SEraserError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
