"""Command-line client for the codec service.

Every subcommand builds a JSON request and posts it to the service API.  By
default the app is mounted in-process (no server required, same request
validation and handlers); pass ``--server http://host:port`` to talk to a
running ``tubecodec serve`` instance sharing the filesystem instead.
"""
from __future__ import annotations

import argparse
import os
import sys


def _pin_blas_threads():
    # the worker pool parallelizes across tubelet positions; the tensors are
    # far too small for BLAS threading to help (it measurably hurts)
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, "1")


def _parse_pair(text: str):
    try:
        a, b = (int(v) for v in text.split(","))
        return (a, b)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'h,w' integers; got {text!r}")


def _parse_int_list(text: str):
    return [int(v) for v in text.split(",")]


def _parse_float_list(text: str):
    return [float(v) for v in text.split(",")]


def _parse_str_list(text: str):
    return [v.strip() for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tubecodec",
        description="Neural weight-stream video codec: encode videos as coded "
        "per-patch network-weight residual streams.",
    )
    parser.add_argument(
        "--server",
        default=None,
        help="URL of a running service; default runs the service in-process",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a deterministic synthetic test video")
    p.add_argument("--pattern", default="moving_sinusoid")
    p.add_argument("--speed", type=float, default=1.0)
    p.add_argument("--frames", type=int, default=32)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help=".rgb file or PPM directory")

    p = sub.add_parser("pretrain", help="fit shared base parameters on a video corpus")
    p.add_argument("videos", nargs="+", help="corpus videos (.rgb files or PPM dirs)")
    p.add_argument("--config", default="tiny-32", help="preset name or JSON config file")
    p.add_argument("--epochs", type=int, default=400)
    p.add_argument("--learning-rate", type=float, default=1e-2)
    p.add_argument("--max-tubelets", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output base-parameter file (.npz)")

    p = sub.add_parser("encode", help="encode a video into a coded container")
    p.add_argument("video")
    p.add_argument("--config", default="tiny-32")
    p.add_argument("--base", required=True, help="base-parameter file from pretrain")
    p.add_argument("--bits", type=int, default=4, choices=range(4, 9))
    p.add_argument("--lambda", dest="lambda_temp", type=float, default=0.1)
    p.add_argument("--residual-mode", default="previous", choices=("none", "first", "previous"))
    p.add_argument("--keyframe-interval", type=int, default=0, help="0 = never")
    p.add_argument("--overlap", type=_parse_pair, default=(0, 0), metavar="OH,OW")
    p.add_argument("--fusion", default="crop", choices=("tile", "crop", "blend"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--finetune-iterations", type=int, default=None)
    p.add_argument("--learning-rate", type=float, default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("decode", help="decode a container back into a video")
    p.add_argument("container")
    p.add_argument("--base", required=True)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="PSNR/SSIM between two videos, plus bpp of a container")
    p.add_argument("--ref", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--container", default=None)

    p = sub.add_parser("rd-sweep", help="rate-distortion sweep over bits/lambda/mode grids")
    p.add_argument("video")
    p.add_argument("--config", default="tiny-32")
    p.add_argument("--base", required=True)
    p.add_argument("--bits", type=_parse_int_list, default=[4, 5, 6, 7, 8], metavar="4,5,...")
    p.add_argument("--lambdas", type=_parse_float_list, default=[0.1], metavar="0,0.1,...")
    p.add_argument("--modes", type=_parse_str_list, default=["previous"], metavar="none,first,previous")
    p.add_argument("--overlap", type=_parse_pair, default=(0, 0), metavar="OH,OW")
    p.add_argument("--fusion", default="crop", choices=("tile", "crop", "blend"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--finetune-iterations", type=int, default=None)
    p.add_argument("--learning-rate", type=float, default=None)
    p.add_argument("--out", required=True, help="output CSV")

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8060)

    return parser


def make_client(server: str | None):
    import httpx

    if server:
        return httpx.Client(base_url=server, timeout=None)
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        from fastapi.testclient import TestClient

        from .service import app

        return TestClient(app)


def _post(client, path: str, payload: dict) -> dict:
    resp = client.post(path, json=payload)
    if resp.status_code != 200:
        try:
            detail = resp.json().get("detail", resp.text)
        except ValueError:
            detail = resp.text
        raise SystemExit(f"error: {detail}")
    return resp.json()


def _print_fields(data: dict):
    for key, value in data.items():
        if isinstance(value, float):
            print(f"{key}: {value:.6g}")
        else:
            print(f"{key}: {value}")


def run(args) -> int:
    if args.command == "serve":
        import uvicorn

        from .service import app

        uvicorn.run(app, host=args.host, port=args.port)
        return 0

    client = make_client(args.server)
    if args.command == "synth":
        data = _post(
            client,
            "/synth",
            {
                "pattern": args.pattern,
                "speed": args.speed,
                "frames": args.frames,
                "height": args.height,
                "width": args.width,
                "seed": args.seed,
                "out": args.out,
            },
        )
    elif args.command == "pretrain":
        data = _post(
            client,
            "/pretrain",
            {
                "videos": args.videos,
                "config": args.config,
                "epochs": args.epochs,
                "learning_rate": args.learning_rate,
                "max_tubelets": args.max_tubelets,
                "seed": args.seed,
                "out": args.out,
            },
        )
    elif args.command == "encode":
        data = _post(
            client,
            "/encode",
            {
                "video": args.video,
                "config": args.config,
                "base": args.base,
                "out": args.out,
                "bits": args.bits,
                "lambda_temp": args.lambda_temp,
                "residual_mode": args.residual_mode,
                "keyframe_interval": args.keyframe_interval or None,
                "overlap": args.overlap,
                "fusion": args.fusion,
                "seed": args.seed,
                "threads": args.threads,
                "iterations": args.iterations,
                "finetune_iterations": args.finetune_iterations,
                "learning_rate": args.learning_rate,
            },
        )
    elif args.command == "decode":
        data = _post(
            client,
            "/decode",
            {
                "container": args.container,
                "base": args.base,
                "out": args.out,
                "threads": args.threads,
            },
        )
    elif args.command == "eval":
        data = _post(
            client,
            "/eval",
            {"reference": args.ref, "candidate": args.test, "container": args.container},
        )
    elif args.command == "rd-sweep":
        data = _post(
            client,
            "/rd_sweep",
            {
                "video": args.video,
                "config": args.config,
                "base": args.base,
                "out": args.out,
                "bits": args.bits,
                "lambdas": args.lambdas,
                "modes": args.modes,
                "overlap": args.overlap,
                "fusion": args.fusion,
                "seed": args.seed,
                "threads": args.threads,
                "iterations": args.iterations,
                "finetune_iterations": args.finetune_iterations,
                "learning_rate": args.learning_rate,
            },
        )
        points = data.pop("points", [])
        _print_fields(data)
        print(f"points: {len(points)}")
        return 0
    else:  # pragma: no cover
        raise SystemExit(f"unknown command {args.command}")
    _print_fields(data)
    return 0


def main(argv=None) -> int:
    _pin_blas_threads()
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except SystemExit:
        raise
    except Exception as exc:  # pragma: no cover - defensive CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
