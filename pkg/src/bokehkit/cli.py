"""Command-line front end: ``bokehkit <subcommand> [flags]``.

Every subcommand accepts ``--config FILE`` (JSON object keyed by flag
destination names, e.g. ``{"max_radius": 8}``); explicit flags win.

Exit codes: 0 success, 2 usage, 3 I/O error, 4 validation error,
5 verification failure (gradcheck / oracle).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import harness, losses
from .dataprep import estimate_translation, prepare_pairs
from .imaging import CorruptImageError, ImageError, UnsupportedImageError, load_image, save_image
from .metrics import DEFAULT_SCORE_CONSTANT, TABLE1, challenge_score
from .render import RenderParams, render_bokeh
from .tinynet import NetSpec, WeightFormatError, load_weights, random_weights, save_weights, unet_forward

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_INVALID, EXIT_VERIFY = 0, 2, 3, 4, 5

log = logging.getLogger("bokehkit")


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _spec(args) -> NetSpec:
    return NetSpec(levels=args.levels, base_channels=args.base_channels,
                   skip_connections=not args.no_skip, leaky_slope=args.slope,
                   channels=args.channels)


def _weights(args, spec):
    if args.weights:
        return load_weights(args.weights)
    return random_weights(spec, args.seed)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _need_out(args):
    if not args.out:
        raise ValueError(f"{args.command} writes a PNG; pass --out")


def cmd_render(args) -> int:
    _need_out(args)
    img = load_image(args.image)
    disp = load_image(args.disparity)
    if disp.shape[0] != 1:
        raise ImageError("disparity map must be a single-channel PNG")
    p = RenderParams(max_radius=args.max_radius, focal_disparity=args.focal,
                     mask_threshold=args.threshold, feather=args.feather)
    save_image(render_bokeh(img, disp[0], p), args.out, args.depth)
    return EXIT_OK


def cmd_infer(args) -> int:
    _need_out(args)
    spec = _spec(args)
    weights = _weights(args, spec)
    if args.save_weights:
        save_weights(weights, args.save_weights)
    out = unet_forward(load_image(args.image), weights, spec, args.jobs)
    save_image(out, args.out, args.depth)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    runtime = harness.runtime_stats([args.runtime_ms]) if args.runtime_ms else None
    report = harness.evaluate_pairs(args.pred, args.gt, jobs=args.jobs, runtime=runtime, c=args.c)
    _emit(report.to_csv() if args.format == "csv" else report.to_json() + "\n", args.out)
    return EXIT_OK


def cmd_score(args) -> int:
    value = challenge_score(args.psnr, args.runtime_ms, args.c)
    _emit(json.dumps({"psnr": args.psnr, "runtime_ms": args.runtime_ms, "c": args.c,
                      "score": value}) + "\n", args.out)
    return EXIT_OK


def cmd_align(args) -> int:
    dy, dx = estimate_translation(load_image(args.a), load_image(args.b), args.search)
    _emit(json.dumps({"dy": dy, "dx": dx}) + "\n", args.out)
    return EXIT_OK


def cmd_prep(args) -> int:
    manifest = prepare_pairs(args.root, args.dest, target_h=args.height, search=args.search,
                             depth=args.depth, split=args.split, jobs=args.jobs)
    log.info("prepared %d pairs (%d unpaired files)", len(manifest.entries), len(manifest.unpaired))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    corrupt = None
    if args.corrupt:
        bad = set(args.corrupt)
        corrupt = lambda tag, g: g * 1.01 + 1e-3 if tag in bad else g  # noqa: E731
    results = harness.run_gradcheck(args.terms, range(args.seeds), eps=args.eps, sweep=args.sweep,
                                    corrupt=corrupt, jobs=args.jobs)
    lines = []
    for r in results:
        status = ("PASS" if r.passed else "FAIL") if r.gating else "info"
        lines.append(f"{status} {r.tag:<14} eps={r.eps:.0e} max_rel_err={r.max_rel_error:.3e}")
    _emit("\n".join(lines) + "\n", args.out)
    failed = [r.tag for r in results if r.gating and not r.passed]
    if failed:
        log.error("gradient check failed for: %s", ", ".join(failed))
        return EXIT_VERIFY
    return EXIT_OK


def cmd_oracle(args) -> int:
    worst = harness.disc_blur_equivalence(args.images, args.size, args.max_radius, args.seed)
    ok = worst <= harness.ORACLE_TOL
    _emit(f"{'PASS' if ok else 'FAIL'} disc_blur vs brute force: max_abs_err={worst:.3e}\n", args.out)
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_bench(args) -> int:
    spec = _spec(args)
    stats = harness.bench_forward(spec, _weights(args, spec), args.size, args.warmup,
                                  args.iters, args.seed, args.jobs)
    _emit(json.dumps(asdict(stats), indent=2) + "\n", args.out)
    return EXIT_OK


def cmd_leaderboard(args) -> int:
    rows = harness.read_leaderboard_csv(args.input) if args.input else list(TABLE1)
    _emit(harness.emit_leaderboard(rows, args.format), args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _shared(p):
    p.add_argument("--jobs", type=int, default=1, help="worker threads")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="JSON file with default flag values")
    p.add_argument("--out", help="output path (default: stdout)")


def _net_flags(p):
    p.add_argument("--weights", help="BKW1 weight file (default: seeded random weights)")
    p.add_argument("--levels", type=int, default=3)
    p.add_argument("--base-channels", type=int, default=16)
    p.add_argument("--slope", type=float, default=0.2, help="leaky ReLU slope")
    p.add_argument("--no-skip", action="store_true", help="disable skip connections")
    p.add_argument("--channels", type=int, default=3, choices=(1, 3))


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = argparse.ArgumentParser(prog="bokehkit", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        _shared(p)
        p.set_defaults(func=func)
        subs[name] = p
        return p

    p = add("render", cmd_render, "disparity-guided bokeh rendering")
    p.add_argument("--image", required=True)
    p.add_argument("--disparity", required=True, help="single-channel PNG, larger = closer")
    p.add_argument("--max-radius", type=float, default=16.0)
    p.add_argument("--focal", type=float, default=1.0, help="in-focus normalised disparity")
    p.add_argument("--threshold", type=float, default=0.6, help="foreground mask threshold")
    p.add_argument("--feather", type=float, default=0.05, help="mask ramp half-width")
    p.add_argument("--depth", type=int, default=8, choices=(8, 16))

    p = add("infer", cmd_infer, "run the tiny U-Net on one image")
    p.add_argument("--image", required=True)
    _net_flags(p)
    p.add_argument("--save-weights", help="also write the weights used to this path")
    p.add_argument("--depth", type=int, default=8, choices=(8, 16))

    p = add("evaluate", cmd_evaluate, "PSNR/SSIM of a prediction directory against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--runtime-ms", type=float, help="runtime to fold into the final score")
    p.add_argument("--c", type=float, default=DEFAULT_SCORE_CONSTANT)

    p = add("score", cmd_score, "challenge score from PSNR and runtime")
    p.add_argument("--psnr", type=float, required=True)
    p.add_argument("--runtime-ms", type=float, required=True)
    p.add_argument("--c", type=float, default=DEFAULT_SCORE_CONSTANT)

    p = add("align", cmd_align, "integer translation between two images")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--search", type=int, default=10)

    p = add("prep", cmd_prep, "align, crop and downscale a directory of pairs")
    p.add_argument("--root", required=True)
    p.add_argument("--dest", required=True)
    p.add_argument("--height", type=int, default=1024)
    p.add_argument("--search", type=int, default=10)
    p.add_argument("--split", choices=("train", "val", "test"), default="train")
    p.add_argument("--depth", type=int, default=16, choices=(8, 16))

    p = add("gradcheck", cmd_gradcheck, "analytic vs finite-difference loss gradients")
    p.add_argument("--terms", nargs="+", default=list(losses.LOSS_TERMS))
    p.add_argument("--seeds", type=int, default=20, help="number of random inputs per term")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--sweep", type=float, nargs="*", default=[1e-4, 1e-6])
    p.add_argument("--corrupt", nargs="*", help=argparse.SUPPRESS)

    p = add("oracle", cmd_oracle, "optimised disc blur vs brute-force enumeration")
    p.add_argument("--images", type=int, default=10)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--max-radius", type=float, default=8.0)

    p = add("bench", cmd_bench, "wall-clock the forward pass")
    _net_flags(p)
    p.add_argument("--size", type=int, default=1024)
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--iters", type=int, default=5)

    p = add("leaderboard", cmd_leaderboard, "rank leaderboard rows")
    p.add_argument("--input", help="CSV with team,psnr,ssim,runtime_ms,score (default: published table)")
    p.add_argument("--format", choices=("csv", "markdown"), default="markdown")

    return parser, subs


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except OSError as exc:
            print(f"bokehkit: {exc}", file=sys.stderr)
            return EXIT_IO
        except json.JSONDecodeError as exc:
            print(f"bokehkit: bad config {args.config}: {exc}", file=sys.stderr)
            return EXIT_INVALID
        if not isinstance(cfg, dict):
            print(f"bokehkit: config {args.config} must hold a JSON object", file=sys.stderr)
            return EXIT_INVALID
        subs[args.command].set_defaults(**{k.replace("-", "_"): v for k, v in cfg.items()})
        args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (FileNotFoundError, PermissionError, IsADirectoryError,
            CorruptImageError, UnsupportedImageError, WeightFormatError) as exc:
        print(f"bokehkit: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ImageError, ValueError, KeyError) as exc:
        print(f"bokehkit: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"bokehkit: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
