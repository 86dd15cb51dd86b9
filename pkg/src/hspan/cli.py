"""Command-line entry point.

Exit codes: 0 on success, 2 when inputs fail validation, 3 when an
evaluation finished but some tile/method combinations errored.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .bench import (
    MethodSpec,
    RunConfig,
    crop_cube,
    emit_report,
    extract_signature,
    render,
    run_fr,
    run_rr,
    save_png,
    write_synth_dataset,
)
from .core import FrPair, HyperCube, PanImage, ValidationError, load_container
from .pipeline import PipelineParams, build_dataset, discover_scenes
from .sharpen import SHARPENERS, export_fused


def _parse_floats(text: str, count: int, what: str) -> tuple[float, ...]:
    parts = text.split(",")
    if len(parts) != count:
        raise ValidationError(f"{what} needs {count} comma-separated values, got {text!r}")
    try:
        return tuple(float(p) for p in parts)
    except ValueError as exc:
        raise ValidationError(f"bad {what} {text!r}") from exc


def _parse_ints(text: str, count: int, what: str) -> tuple[int, ...]:
    return tuple(int(v) for v in _parse_floats(text, count, what))


def _parse_size(text: str) -> tuple[int, int]:
    parts = text.split(",")
    if len(parts) == 1:
        parts = [parts[0], parts[0]]
    if len(parts) != 2:
        raise ValidationError(f"size must be N or H,W, got {text!r}")
    try:
        h, w = int(parts[0]), int(parts[1])
    except ValueError as exc:
        raise ValidationError(f"bad size {text!r}") from exc
    return h, w


class _MethodAction(argparse.Action):
    """Collects --method/--import occurrences preserving their order."""

    def __call__(self, parser, namespace, values, option_string=None):
        items = list(getattr(namespace, self.dest) or [])
        kind = "import" if option_string == "--import" else "builtin"
        items.append((kind, values))
        setattr(namespace, self.dest, items)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hspan",
        description="Hyperspectral pansharpening benchmark tools.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="build a tiled dataset from scene directories")
    p.add_argument("--scenes", required=True, help="directory of scene subdirectories")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--invalid-threshold", type=float, default=0.05)
    p.add_argument("--hs-tile", type=int, default=384)
    p.add_argument("--pan-tile", type=int, default=2304)
    p.add_argument("--ratio", type=int, default=6)
    p.add_argument("--rr", action="store_true", help="also write reduced-resolution triplets")
    p.add_argument("--no-mtf", action="store_true", help="degrade with an ideal lowpass instead of the sensor model")
    p.add_argument("--split-seed", type=int, default=0)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("sharpen", help="fuse one pan/cube pair")
    p.add_argument("--method", required=True, choices=sorted(SHARPENERS))
    p.add_argument("--pan", required=True)
    p.add_argument("--hs", required=True)
    p.add_argument("--ratio", type=int, default=6)
    p.add_argument("--out", required=True)
    p.add_argument("--clamp-negative", action="store_true")
    p.set_defaults(func=cmd_sharpen)

    p = sub.add_parser("eval", help="score methods over a dataset manifest")
    p.add_argument("--protocol", required=True, choices=("rr", "fr"))
    p.add_argument("--manifest", required=True)
    p.add_argument("--method", action=_MethodAction, dest="methods", metavar="NAME",
                   help="built-in method name (repeatable)")
    p.add_argument("--import", action=_MethodAction, dest="methods", metavar="DIR",
                   help="directory of externally fused tiles (repeatable)")
    p.add_argument("--gnyq", type=float, default=0.3)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--h-over-l", type=float, default=0.1666667)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("csv", "json", "md"), default="csv")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="write a synthetic dataset for smoke tests")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", default="64,64", help="coarse grid as N or H,W")
    p.add_argument("--bands", type=int, default=16)
    p.add_argument("--ratio", type=int, default=6)
    p.add_argument("--tiles", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("render", help="render three bands to an 8-bit PNG")
    p.add_argument("--cube", required=True)
    p.add_argument("--wavelengths", default="641,563,478", help="R,G,B targets in nm")
    p.add_argument("--stretch", default="1,99", help="low,high percentiles")
    p.add_argument("--roi", help="optional x,y,w,h crop before rendering")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("signature", help="mean spectrum over a region as JSON")
    p.add_argument("--cube", required=True)
    p.add_argument("--roi", required=True, help="x,y,w,h")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_signature)

    return parser


def cmd_prepare(args) -> int:
    params = PipelineParams(
        invalid_threshold=args.invalid_threshold,
        hs_tile=args.hs_tile,
        pan_tile=args.pan_tile,
        ratio=args.ratio,
        rr=args.rr,
        lowpass="ideal" if args.no_mtf else "mtf",
        split_seed=args.split_seed,
    )
    scenes = discover_scenes(args.scenes)
    manifest = build_dataset(scenes, params, args.out)
    print(
        f"prepared {len(manifest.tiles)} tiles from {len(scenes)} scenes "
        f"({manifest.band_mask.kept}/{len(manifest.band_mask)} bands kept) "
        f"-> {Path(args.out) / 'manifest.json'}"
    )
    return 0


def _load_as(path, kind, what):
    obj = load_container(path)
    if not isinstance(obj, kind):
        raise ValidationError(f"{what} at {path} is not a {kind.__name__} container")
    return obj


def cmd_sharpen(args) -> int:
    pan = _load_as(args.pan, PanImage, "--pan")
    hs = _load_as(args.hs, HyperCube, "--hs")
    pair = FrPair(pan, hs)
    if pair.ratio != args.ratio:
        raise ValidationError(f"pair ratio {pair.ratio} != requested --ratio {args.ratio}")
    fused = SHARPENERS[args.method](pair)
    export_fused(fused, args.out, clamp_negative=args.clamp_negative)
    print(f"sharpened {args.hs} with {args.method} -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    if not args.methods:
        raise ValidationError("give at least one --method or --import")
    methods = tuple(
        MethodSpec.builtin(v) if kind == "builtin" else MethodSpec.imported(v)
        for kind, v in args.methods
    )
    config = RunConfig(
        manifest=args.manifest,
        protocol=args.protocol,
        methods=methods,
        h_over_l=args.h_over_l,
        nyquist_gain=args.gnyq,
        alpha=args.alpha,
        beta=args.beta,
        workers=args.workers,
    )
    report = run_rr(config) if args.protocol == "rr" else run_fr(config)
    out = emit_report(report, args.out, args.format)
    print(f"wrote {out} ({len(report.rows)} rows, {len(report.aggregates)} aggregates)")
    if not args.no_figures and report.rows:
        from .figures import emit_figures

        print(f"wrote {emit_figures(report, out)}")
    for failure in report.failures:
        print(f"failed: {failure.tile} / {failure.method}: {failure.error}", file=sys.stderr)
    return 3 if report.failures else 0


def cmd_synth(args) -> int:
    manifest = write_synth_dataset(
        args.out,
        seed=args.seed,
        hs_size=_parse_size(args.size),
        bands=args.bands,
        ratio=args.ratio,
        tiles=args.tiles,
    )
    print(f"wrote {len(manifest.tiles)} synthetic tiles -> {Path(args.out) / 'manifest.json'}")
    return 0


def cmd_render(args) -> int:
    cube = _load_as(args.cube, HyperCube, "--cube")
    if args.roi:
        cube = crop_cube(cube, _parse_ints(args.roi, 4, "--roi"))
    rgb = render(
        cube,
        _parse_floats(args.wavelengths, 3, "--wavelengths"),
        _parse_floats(args.stretch, 2, "--stretch"),
    )
    save_png(rgb, args.out)
    print(f"rendered {args.cube} -> {args.out}")
    return 0


def cmd_signature(args) -> int:
    cube = _load_as(args.cube, HyperCube, "--cube")
    roi = _parse_ints(args.roi, 4, "--roi")
    sig = extract_signature(cube, roi)
    doc = {
        "roi": list(roi),
        "wavelengths_nm": list(cube.meta.wavelengths),
        "mean": [float(v) for v in sig],
    }
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
    print(f"wrote {out}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
