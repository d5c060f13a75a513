"""Command-line client for the service.

By default the client talks to the FastAPI app in-process (no server needed);
``--server URL`` targets a running instance instead. Reports are printed as
line-delimited JSON records; ``--out`` also writes them to a file. Exit status
is 0 on success/pass and 1 on failure, with the failing invariant on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys


def _client(server):
    import httpx

    if server:
        return httpx.Client(base_url=server, timeout=600.0)
    from starlette.testclient import TestClient

    from .service import app

    return TestClient(app, base_url="http://fpt.local")


def _load_config(path):
    with open(path) as fh:
        return json.load(fh)


def _emit(records, out_path):
    lines = [json.dumps(r, sort_keys=True) for r in records]
    for line in lines:
        print(line)
    if out_path:
        with open(out_path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


def build_parser():
    p = argparse.ArgumentParser(prog="fpt", description=__doc__)
    p.add_argument("--server", help="URL of a running service (default: in-process)")
    sub = p.add_subparsers(dest="command", required=True)

    fw = sub.add_parser("forward", help="run a full pyramid forward pass")
    fw.add_argument("--config", required=True)
    fw.add_argument("--seed", type=int, default=0)
    fw.add_argument("--mode", choices=["train", "eval"], default="eval")
    fw.add_argument("--weights-in")
    fw.add_argument("--weights-out")
    fw.add_argument("--out")

    gc = sub.add_parser("gradcheck", help="analytic vs central-difference gradients")
    gc.add_argument("--config", required=True)
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--h", type=float, default=1e-5)
    gc.add_argument("--tol", type=float, default=1e-5)
    gc.add_argument("--mode", choices=["train", "eval"], default="eval")
    gc.add_argument("--out")

    ct = sub.add_parser("count", help="parameter and FLOP accounting")
    ct.add_argument("--config", required=True)
    ct.add_argument("--out")

    bn = sub.add_parser("bench", help="repeat forward passes and time them")
    bn.add_argument("--config", required=True)
    bn.add_argument("--seed", type=int, default=0)
    bn.add_argument("--repeats", type=int, default=3)
    bn.add_argument("--out")

    gen = sub.add_parser("gen", help="write a default config document")
    gen.add_argument("--preset", choices=["instance", "pixel", "tiny"], default="instance")
    gen.add_argument("--out")

    serve = sub.add_parser("serve", help="run the HTTP service")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8000)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)

    if args.command == "serve":
        import uvicorn

        from .service import app

        uvicorn.run(app, host=args.host, port=args.port)
        return 0

    with _client(args.server) as client:
        if args.command == "forward":
            resp = client.post(
                "/forward",
                json={
                    "config": _load_config(args.config),
                    "seed": args.seed,
                    "mode": args.mode,
                    "weights_in": args.weights_in,
                    "weights_out": args.weights_out,
                },
            )
        elif args.command == "gradcheck":
            resp = client.post(
                "/gradcheck",
                json={
                    "config": _load_config(args.config),
                    "seed": args.seed,
                    "h": args.h,
                    "tol": args.tol,
                    "mode": args.mode,
                },
            )
        elif args.command == "count":
            resp = client.post("/count", json={"config": _load_config(args.config)})
        elif args.command == "bench":
            resp = client.post(
                "/bench",
                json={
                    "config": _load_config(args.config),
                    "seed": args.seed,
                    "repeats": args.repeats,
                },
            )
        elif args.command == "gen":
            resp = client.post("/gen", json={"preset": args.preset})
        else:  # pragma: no cover
            raise SystemExit(2)

    if resp.status_code != 200:
        detail = resp.json().get("detail", resp.text)
        print(f"error: {detail}", file=sys.stderr)
        return 1
    body = resp.json()
    _emit(body["records"], getattr(args, "out", None))
    if not body["ok"]:
        failing = [
            r for r in body["records"] if r.get("record") == "gradcheck" and not r.get("pass")
        ]
        for r in failing:
            print(
                f"gradcheck failed: {r['name']} max_rel_err={r['max_rel_err']:.3e}",
                file=sys.stderr,
            )
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
