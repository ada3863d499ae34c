"""``qwthn`` command line.

Each subcommand is one request to the HTTP service: against ``--server URL``
when given, otherwise against an in-process instance of the same app.

Exit codes: 0 success, 2 configuration error, 3 numerical check failure,
1 anything else.
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings
from pathlib import Path

import httpx

from . import __version__
from .runs import read_jsonl

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_ERROR):
        super().__init__(message)
        self.code = code


def make_client(server: str | None):
    if server:
        return httpx.Client(base_url=server, timeout=None)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        from fastapi.testclient import TestClient

    from .service import create_app

    return TestClient(create_app())


def _request(client, method: str, path: str, body: dict | None = None) -> dict:
    resp = client.request(method, path, json=body)
    try:
        data = resp.json()
    except ValueError:
        data = {"detail": resp.text}
    if resp.status_code == 422:
        detail = data.get("detail")
        if data.get("error") == "config":
            raise CliError(f"config error: {detail}", EXIT_CONFIG)
        raise CliError(f"invalid request: {json.dumps(detail)}", EXIT_CONFIG)
    if resp.status_code == 500 and data.get("error") == "diverged":
        raise CliError(f"training diverged: {data['detail']}", EXIT_NUMERIC)
    if resp.status_code >= 400:
        raise CliError(f"{method} {path} failed ({resp.status_code}): {data.get('detail', data)}")
    return data


def _read_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise CliError(f"config error: {p} does not exist", EXIT_CONFIG)
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise CliError(f"config error: {p} is not valid JSON: {exc}", EXIT_CONFIG) from None
    if not isinstance(data, dict):
        raise CliError("config error: top level must be a JSON object", EXIT_CONFIG)
    return data


def _print_suite(data: dict, as_json: bool) -> int:
    if as_json:
        print(json.dumps(data, indent=2))
    else:
        for r in data["results"]:
            tag = "PASS" if r["passed"] else "FAIL"
            extra = f" ({r['detail']})" if r["detail"] else ""
            print(f"{tag} {r['name']}: {r['value']:.3e} vs {r['tolerance']:.1e}{extra}")
        print(f"{data['suite']}: {'passed' if data['passed'] else 'FAILED'}")
    return EXIT_OK if data["passed"] else EXIT_NUMERIC


def cmd_train(client, args) -> int:
    out = Path(args.out).resolve()
    m = _request(client, "POST", "/train", {"config": _read_config(args.config), "out_dir": str(out)})
    s = m["summary"]
    print(f"{s['task']} / {s['adapter']}: {s['steps']} steps, train loss {s['initial_train_loss']:.6g} -> "
          f"{s['final_train_loss']:.6g}, val {s['final_val_loss']:.6g}")
    print(f"trainable parameters {s['params']['total']}; artifacts in {out}")
    return EXIT_OK


def cmd_eval(client, args) -> int:
    try:
        records = read_jsonl(args.input)
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read {args.input}: {exc}") from None
    run_dir = str(Path(args.run).resolve()) if args.run else None
    rep = _request(client, "POST", "/eval", {"records": records, "run_dir": run_dir, "percent": args.percent})
    print(json.dumps(rep, indent=2))
    return EXIT_OK


def cmd_params(client, args) -> int:
    data = _request(client, "POST", "/params", {"config": _read_config(args.config)})
    if args.json:
        print(json.dumps({k: v for k, v in data.items() if k != "table"}, indent=2))
    else:
        print(data["table"])
    return EXIT_OK


def cmd_qcheck(client, args) -> int:
    data = _request(client, "POST", "/checks/qcheck", {"backend": args.backend, "shots": args.shots, "seed": args.seed})
    return _print_suite(data, args.json)


def cmd_gradcheck(client, args) -> int:
    return _print_suite(_request(client, "POST", "/checks/gradcheck", {"seed": args.seed}), args.json)


def cmd_serve(args) -> int:
    import uvicorn

    uvicorn.run("qwthn.service.app:app", host=args.host, port=args.port)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qwthn", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"qwthn {__version__}")
    p.add_argument("--server", help="base URL of a running service (default: in-process)")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train an adapter and write a run directory")
    t.add_argument("--config", help="JSON config (omitted keys take the shipped defaults)")
    t.add_argument("--out", required=True, help="run directory")

    e = sub.add_parser("eval", help="score generated text from a JSON-lines file")
    e.add_argument("--run", help="run directory to store eval.json / eval.csv in")
    e.add_argument("--input", required=True)
    e.add_argument("--percent", action="store_true", help="report scores x100")

    pa = sub.add_parser("params", help="QWTHN vs LoRA parameter counts")
    pa.add_argument("--config")
    pa.add_argument("--json", action="store_true")

    q = sub.add_parser("qcheck", help="backend equivalence, protocol and circuit-gradient checks")
    q.add_argument("--backend", choices=["local_exact", "mock_cloud"], default="mock_cloud")
    q.add_argument("--shots", type=int, default=1_000_000)
    q.add_argument("--seed", type=int, default=7)
    q.add_argument("--json", action="store_true")

    g = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients of every stage")
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--json", action="store_true")

    s = sub.add_parser("serve", help="run the HTTP service")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8000)
    return p


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "params": cmd_params, "qcheck": cmd_qcheck,
            "gradcheck": cmd_gradcheck}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "serve":
        return cmd_serve(args)
    try:
        with make_client(args.server) as client:
            return COMMANDS[args.command](client, args)
    except CliError as exc:
        print(f"qwthn: {exc}", file=sys.stderr)
        return exc.code
    except httpx.HTTPError as exc:
        print(f"qwthn: cannot reach {args.server}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
