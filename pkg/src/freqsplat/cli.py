"""Command-line interface.

Every failure exits nonzero with one machine-readable JSON error line on
stderr; config, I/O, and provider failures get distinct exit codes (2, 3, 4).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import io as fio
from . import pipeline
from .errors import ConfigError, FreqsplatError, ProtocolError, ProviderError
from .renderer import RenderSettings, rasterize
from .scene import orbit_cameras

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_PROVIDER = 4


def _fail(code: int, kind: str, message: str) -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def cmd_generate(args) -> int:
    config = pipeline.load_config(args.config)
    if args.output_dir:
        config["run"]["output_dir"] = args.output_dir
    paths = pipeline.run_generate(config)
    print(json.dumps(paths, indent=2))
    return 0


def cmd_render(args) -> int:
    cloud = fio.load_gaussian_ply(args.ply)
    n_az, *elevs = args.orbit.split(",")
    elevations = [float(e) for e in elevs] or [0.0]
    cams = orbit_cameras(int(n_az), elevations, args.distance, args.fov,
                         args.size, args.size)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    settings = RenderSettings()
    for i, cam in enumerate(cams):
        out = rasterize(cloud, cam, (1.0, 1.0, 1.0), settings)
        fio.save_png(out_dir / f"orbit_{i:03d}.png", out.color)
    print(json.dumps({"renders": str(out_dir), "count": len(cams)}))
    return 0


def cmd_eval(args) -> int:
    report = pipeline.run_eval(args.pred, args.gt, args.out,
                               threshold=args.threshold, n_points=args.points,
                               seed=args.seed)
    print(json.dumps(report, indent=2, default=float))
    return 0


def cmd_analyze_spectrum(args) -> int:
    fractions = tuple(float(v) for v in args.fractions.split(","))
    result = pipeline.run_analyze_spectrum(args.input, args.out, fractions)
    print(json.dumps({"summary": result["summary"],
                      "images": sorted(result["cutoffs"])}, indent=2))
    return 0


def cmd_init(args) -> int:
    rng = np.random.default_rng(args.seed)
    cloud = pipeline.init_gaussians(args.source, args.count,
                                    (args.bbox_min, args.bbox_max), rng)
    fio.save_gaussian_ply(args.out, cloud)
    print(json.dumps({"cloud": args.out, "count": len(cloud)}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="freqsplat",
        description="Frequency-split score distillation on Gaussian splats",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="run the staged optimization from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--output-dir", default=None)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("render", help="render orbit views of a splat PLY")
    p.add_argument("--ply", required=True)
    p.add_argument("--orbit", default="7,-30,0,30",
                   help="n_azimuth,elev1,elev2,... (default 7,-30,0,30)")
    p.add_argument("--out", default="renders")
    p.add_argument("--distance", type=float, default=1.5)
    p.add_argument("--fov", type=float, default=49.1)
    p.add_argument("--size", type=int, default=256)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="image + geometry metrics between two results")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", default="eval")
    p.add_argument("--threshold", type=float, default=0.2)
    p.add_argument("--points", type=int, default=16384)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze-spectrum", help="amplitude spectra and energy profiles")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fractions", default="0.5,0.85,0.99")
    p.set_defaults(func=cmd_analyze_spectrum)

    p = sub.add_parser("init", help="write an initialized splat cloud")
    p.add_argument("--source", default="random", help="'random' or a point PLY path")
    p.add_argument("--count", type=int, default=4096)
    p.add_argument("--bbox-min", type=float, default=-0.5)
    p.add_argument("--bbox-max", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="init.ply")
    p.set_defaults(func=cmd_init)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", str(exc))
    except (ProviderError, ProtocolError) as exc:
        return _fail(EXIT_PROVIDER, "provider", str(exc))
    except (OSError, FileNotFoundError) as exc:
        return _fail(EXIT_IO, "io", str(exc))
    except FreqsplatError as exc:
        return _fail(1, "error", str(exc))


if __name__ == "__main__":
    sys.exit(main())
