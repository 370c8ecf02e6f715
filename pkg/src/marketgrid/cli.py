"""Command-line client for the marketgrid service.

Requests go to a running server when ``--url`` is given and to an
in-process instance of the app otherwise, so the CLI and the HTTP API
always share one code path.

    marketgrid scenarios list
    marketgrid scenarios dump ieee14-sigma300 > case.yaml
    marketgrid dispatch case.yaml
    marketgrid run ieee14-sigma300 --out runs/s300 --strict
    marketgrid check runs/s300/trajectory.csv --strict
    marketgrid serve --port 8000
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from pathlib import Path
from typing import Optional, Sequence

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_SERVER = 3


class ClientError(RuntimeError):
    def __init__(self, status: int, detail: str):
        super().__init__(detail)
        self.status = status


class Client:
    def __init__(self, url: Optional[str] = None, timeout: float = 600.0):
        if url:
            import httpx

            self._http = httpx.Client(base_url=url, timeout=timeout)
        else:
            with warnings.catch_warnings():
                # starlette warns about its httpx backend on import; harmless here
                warnings.simplefilter("ignore")
                from fastapi.testclient import TestClient

            from .service import app

            self._http = TestClient(app, raise_server_exceptions=False)

    def _call(self, method: str, path: str, body: Optional[dict] = None) -> dict:
        resp = self._http.request(method, path, json=body)
        if resp.status_code >= 400:
            try:
                detail = resp.json().get("detail", resp.text)
            except ValueError:
                detail = resp.text
            if not isinstance(detail, str):
                detail = json.dumps(detail)
            raise ClientError(resp.status_code, detail)
        return resp.json()

    def scenarios(self) -> list[str]:
        return self._call("GET", "/scenarios")["scenarios"]

    def dump(self, name: str) -> str:
        return self._call("GET", f"/scenarios/{name}")["yaml"]

    def dispatch(self, ref: dict) -> dict:
        return self._call("POST", "/dispatch", ref)

    def run(self, ref: dict, out_dir=None, dt=None, sigma=None) -> dict:
        return self._call("POST", "/runs", {**ref, "out_dir": out_dir, "dt": dt, "sigma": sigma})

    def check(self, trajectory: str, scenario: Optional[str] = None) -> dict:
        return self._call("POST", "/check", {"trajectory": trajectory, "scenario": scenario})


def _scenario_ref(arg: str, remote: bool) -> dict:
    # files are sent inline to a remote server; locally the path is enough
    path = Path(arg)
    if remote and path.is_file():
        return {"yaml": path.read_text()}
    if path.is_file():
        return {"scenario": str(path.resolve())}
    return {"scenario": arg}


def _format_dispatch(res: dict) -> str:
    lines = [f"scenario: {res['scenario']}"]
    for s in res["segments"]:
        gens = ", ".join(f"bus {b}: {s['P_g_mw'][b - 1]:.2f} MW" for b in s["active_buses"])
        lines.append(f"{s['t0']:g}-{s['t1']:g} s  lambda={s['lambda']:.4f}  "
                     f"cost={s['cost_per_hour']:.1f} $/h  {gens}")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="marketgrid", description=__doc__.split("\n")[0])
    p.add_argument("--url", default=os.environ.get("MARKETGRID_URL"),
                   help="server base URL (default: in-process)")
    p.add_argument("--json", action="store_true", help="print raw JSON responses")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    r = sub.add_parser("run", help="simulate a scenario and verify every segment")
    r.add_argument("scenario", help="built-in name or YAML file")
    r.add_argument("--out", help="output directory for trajectory and summary")
    r.add_argument("--dt", type=float)
    r.add_argument("--sigma", type=float)
    r.add_argument("--strict", action="store_true", help="exit nonzero if any check fails")

    d = sub.add_parser("dispatch", help="economic dispatch of every scenario segment")
    d.add_argument("scenario")

    s = sub.add_parser("scenarios", help="list or dump built-in scenarios")
    s_sub = s.add_subparsers(dest="action", required=True)
    s_sub.add_parser("list")
    dump = s_sub.add_parser("dump")
    dump.add_argument("name")
    dump.add_argument("-o", "--output", help="write to a file instead of stdout")

    c = sub.add_parser("check", help="re-run the analysis on a saved trajectory")
    c.add_argument("trajectory")
    c.add_argument("--scenario", help="scenario file (default: scenario.yaml beside the trajectory)")
    c.add_argument("--strict", action="store_true", help="exit nonzero if any check fails")

    sv = sub.add_parser("serve", help="start the HTTP server")
    sv.add_argument("--host", default="127.0.0.1")
    sv.add_argument("--port", type=int, default=8000)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    if args.cmd == "serve":
        import uvicorn

        uvicorn.run("marketgrid.service:app", host=args.host, port=args.port)
        return EXIT_OK

    client = Client(args.url)
    remote = bool(args.url)
    try:
        if args.cmd == "scenarios":
            if args.action == "list":
                print("\n".join(client.scenarios()))
            else:
                text = client.dump(args.name)
                if args.output:
                    Path(args.output).write_text(text)
                else:
                    sys.stdout.write(text)
            return EXIT_OK

        if args.cmd == "dispatch":
            res = client.dispatch(_scenario_ref(args.scenario, remote))
            print(json.dumps(res, indent=2) if args.json else _format_dispatch(res))
            return EXIT_OK

        if args.cmd == "run":
            out = str(Path(args.out).resolve()) if args.out and not remote else args.out
            res = client.run(_scenario_ref(args.scenario, remote), out, args.dt, args.sigma)
            print(json.dumps({k: v for k, v in res.items() if k != "text"}, indent=2)
                  if args.json else res["text"], end="" if not args.json else "\n")
            return EXIT_CHECK_FAILED if args.strict and not res["passed"] else EXIT_OK

        if args.cmd == "check":
            traj = str(Path(args.trajectory).resolve()) if not remote else args.trajectory
            scen = args.scenario
            if scen and not remote and Path(scen).is_file():
                scen = str(Path(scen).resolve())
            res = client.check(traj, scen)
            print(json.dumps(res, indent=2) if args.json else res["text"], end="" if not args.json else "\n")
            return EXIT_CHECK_FAILED if args.strict and not res["passed"] else EXIT_OK
    except ClientError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_SERVER if err.status >= 500 else EXIT_USAGE
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
