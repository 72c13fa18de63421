"""`score-bridge serve` command line."""

from __future__ import annotations

import argparse
import json
import sys

from .backends import BackendError
from .server import DEFAULT_MAX_TENSOR_BYTES, BridgeConfig, serve


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="score-bridge")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("serve", help="serve score requests on a local endpoint")
    p.add_argument("--backend", required=True,
                   choices=("echo", "fixture", "sd", "zero123"))
    p.add_argument("--endpoint", default="127.0.0.1:7333", help="host:port")
    p.add_argument("--fixture", default=None, help="fixture archive (.npz)")
    p.add_argument("--model", default=None, help="model identifier for real backends")
    p.add_argument("--device", default="cpu")
    p.add_argument("--max-tensor-bytes", type=int, default=DEFAULT_MAX_TENSOR_BYTES)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    config = BridgeConfig(
        backend=args.backend,
        model_id=args.model,
        device=args.device,
        endpoint=args.endpoint,
        fixture_path=args.fixture,
        max_tensor_bytes=args.max_tensor_bytes,
    )
    try:
        serve(config)
    except BackendError as exc:
        print(json.dumps({"error": exc.code, "message": str(exc)}), file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 0
    return 0


if __name__ == "__main__":
    sys.exit(main())
