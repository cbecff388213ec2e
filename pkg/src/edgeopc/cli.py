"""Command line client.

Every command except ``fixture`` and ``serve`` goes through the HTTP
service: to a running server when ``--server`` (or ``EDGEOPC_SERVER``) is
given, otherwise to an in-process instance of the same app.
"""
from __future__ import annotations

import base64
import json
import os
import sys
import warnings
from pathlib import Path

import click

from . import io
from .errors import EdgeOPCError
from .metrics import MetricsReport

SERVER_ENV = "EDGEOPC_SERVER"
THREADS_ENV = "EDGEOPC_THREADS"


class Client:
    def __init__(self, server: str | None, timeout: float = 3600.0):
        if server:
            import httpx

            self._http = httpx.Client(base_url=server.rstrip("/"), timeout=timeout)
        else:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                from fastapi.testclient import TestClient

            from .service.app import app

            self._http = TestClient(app)
            self._http.__enter__()  # run the startup hook (thread count)

    def post(self, route: str, body: dict) -> dict:
        r = self._http.post(route, json=body)
        if r.status_code != 200:
            try:
                detail = r.json().get("detail", r.text)
            except ValueError:
                detail = r.text
            if not isinstance(detail, str):
                detail = json.dumps(detail)
            raise click.ClickException(f"{route}: {detail}")
        return r.json()


def _fail(exc: Exception) -> click.ClickException:
    return click.ClickException(str(exc))


def _layout_doc(path) -> dict:
    try:
        layout = io.load_layout(path)
    except EdgeOPCError as exc:
        raise _fail(exc) from exc
    return io.layout_to_dict(layout["polygons"], layout["width"], layout["height"], layout["tags"])


def _kernel_source(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise click.ClickException(f"kernel file not found: {p}")
    return {"file_b64": base64.b64encode(p.read_bytes()).decode("ascii")}


def _optimizer_table(path) -> dict:
    if path is None:
        return {}
    try:
        doc = io.load_config_dict(path)
    except EdgeOPCError as exc:
        raise _fail(exc) from exc
    return dict(doc.get("optimizer", {k: v for k, v in doc.items() if k not in ("layout", "kernels", "rules", "out")}))


def _emit(doc, out) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if out:
        Path(out).write_text(text)
    else:
        click.echo(text, nl=False)


@click.group()
@click.option("--server", envvar=SERVER_ENV, default=None,
              help=f"Base URL of an edgeopc service; in-process if omitted (env {SERVER_ENV}).")
@click.option("--threads", type=int, default=None,
              help=f"Rasterizer threads for the in-process service (env {THREADS_ENV}).")
@click.pass_context
def main(ctx, server, threads):
    """Edge-based mask optimization: optimize, check, metrics, seeds."""
    if threads is not None:
        os.environ[THREADS_ENV] = str(threads)
    ctx.obj = {"server": server}


def _client(ctx) -> Client:
    return Client(ctx.obj["server"])


@main.command()
@click.option("--layout", type=click.Path(), help="Target layout JSON (overrides the run file).")
@click.option("--config", "config_path", type=click.Path(), help="Run file, TOML or JSON.")
@click.option("--kernels", type=click.Path(), help="Kernel binary (overrides the run file).")
@click.option("--rules", type=click.Path(), help="Rule JSON (overrides the run file).")
@click.option("--out", type=click.Path(), help="Output directory (overrides the run file).")
@click.option("--raw", is_flag=True, help="Also write mask.raw (row-major uint8, 0/1).")
@click.pass_context
def optimize(ctx, layout, config_path, kernels, rules, out, raw):
    """Optimize a layout; writes mask.pgm, geometry.json, metrics.json, convergence.csv."""
    from .optimizer import load_run_config

    overrides = {"layout": layout, "kernels": kernels, "rules": rules, "out": out}
    try:
        if config_path:
            run = load_run_config(config_path, overrides)
        else:
            run = {k: Path(v) for k, v in overrides.items() if v is not None}
            run["optimizer"] = {}
            missing = [k for k in ("layout", "kernels", "out") if k not in run]
            if missing:
                raise click.ClickException(f"missing --{', --'.join(missing)} (or give --config)")
        body = {"layout": _layout_doc(run["layout"]), "kernels": _kernel_source(run["kernels"]),
                "config": run["optimizer"]}
        if "rules" in run:
            body["rules"] = io.load_rules(run["rules"]).to_dict()
    except EdgeOPCError as exc:
        raise _fail(exc) from exc
    res = _client(ctx).post("/optimize", body)
    mask_pgm = base64.b64decode(res["mask_pgm_b64"])
    geometry = {k: v for k, v in res["geometry"].items() if v is not None}
    paths = io.write_artifacts(run["out"], mask_pgm, geometry, res["metrics"], res["logs"])
    if raw:
        io.save_raw(Path(run["out"]) / "mask.raw", io.parse_pgm(mask_pgm))
    m = res["metrics"]
    click.echo(MetricsReport.table_header())
    click.echo(MetricsReport(**m).table_row(Path(run["layout"]).stem))
    click.echo(f"mrc findings: {res['violations']}; wrote {', '.join(p.name for p in paths.values())} to {run['out']}")


@main.command()
@click.option("--layout", required=True, type=click.Path(), help="Layout or geometry JSON to check.")
@click.option("--rules", type=click.Path(), help="Rule JSON; defaults to the built-in rule set.")
@click.option("--out", type=click.Path(), help="Write the violation list here instead of stdout.")
@click.pass_context
def check(ctx, layout, rules, out):
    """Width and spacing check; exits 1 when anything is found."""
    body = {"layout": _layout_doc(layout)}
    if rules:
        try:
            body["rules"] = io.load_rules(rules).to_dict()
        except EdgeOPCError as exc:
            raise _fail(exc) from exc
    found = _client(ctx).post("/check", body)["violations"]
    _emit(found, out)
    click.echo(f"{len(found)} violation(s)", err=True)
    sys.exit(1 if found else 0)


@main.command()
@click.option("--mask", required=True, type=click.Path(), help="Mask as PGM P5 or raw uint8.")
@click.option("--target", required=True, type=click.Path(), help="Target layout JSON.")
@click.option("--kernels", required=True, type=click.Path(), help="Kernel binary.")
@click.option("--config", "config_path", type=click.Path(), help="Run file for threshold, corners, th_epe.")
@click.option("--width", type=int, help="Raw mask width.")
@click.option("--height", type=int, help="Raw mask height.")
@click.option("--out", type=click.Path(), help="Write metrics JSON here.")
@click.pass_context
def metrics(ctx, mask, target, kernels, config_path, width, height, out):
    """Hard-threshold L2, PVB, EPE count and shot count of a mask."""
    p = Path(mask)
    if not p.is_file():
        raise click.ClickException(f"mask file not found: {p}")
    body = {"mask_b64": base64.b64encode(p.read_bytes()).decode("ascii"), "target": _layout_doc(target),
            "kernels": _kernel_source(kernels), "config": _optimizer_table(config_path),
            "mask_width": width, "mask_height": height}
    m = _client(ctx).post("/metrics", body)
    click.echo(MetricsReport.table_header())
    click.echo(MetricsReport(**m).table_row(p.stem))
    if out:
        io.write_json(out, {k: v for k, v in m.items() if k != "tat_seconds"})


@main.command()
@click.option("--layout", required=True, type=click.Path(), help="Target layout JSON.")
@click.option("--kernels", required=True, type=click.Path(), help="Kernel binary.")
@click.option("--config", "config_path", type=click.Path(), help="Run file (max_srafs, sraf_size, ...).")
@click.option("--out", type=click.Path(), help="Write the seed list here instead of stdout.")
@click.pass_context
def seeds(ctx, layout, kernels, config_path, out):
    """Assist-feature seed positions, for debugging."""
    body = {"layout": _layout_doc(layout), "kernels": _kernel_source(kernels),
            "config": _optimizer_table(config_path)}
    _emit(_client(ctx).post("/seeds", body)["seeds"], out)


@main.command()
@click.option("--out", required=True, type=click.Path(), help="Kernel binary to write.")
@click.option("--size", default=151, show_default=True, help="Kernel size K (odd).")
@click.option("--n-kernels", default=3, show_default=True)
@click.option("--cutoff", default=0.012, show_default=True, help="Pupil radius in cycles/px.")
@click.option("--coherence", default=0.6, show_default=True, help="Source radius relative to the pupil.")
@click.option("--defocus", default=0.0, show_default=True, help="Waves at the pupil edge.")
@click.option("--seed", default=0, show_default=True)
@click.pass_context
def kernels(ctx, out, size, n_kernels, cutoff, coherence, defocus, seed):
    """Write a synthetic kernel file."""
    res = _client(ctx).post("/kernels", {"size": size, "n_kernels": n_kernels, "cutoff": cutoff,
                                         "coherence": coherence, "defocus": defocus, "seed": seed})
    Path(out).write_bytes(base64.b64decode(res["file_b64"]))
    click.echo(f"wrote {out} (energy fraction {res['metadata'].get('energy_fraction', float('nan')):.3f})")


@main.command()
@click.argument("name")
@click.option("--out", required=True, type=click.Path(), help="Layout JSON to write.")
@click.option("--scale", type=float, help="Characteristic length in nm; family default if omitted.")
@click.option("--frame", default=512, show_default=True, help="Frame size in px.")
def fixture(name, out, scale, frame):
    """Export a named test fixture as layout JSON."""
    from .fixtures import make_fixture

    try:
        fx = make_fixture(name, scale, frame)
    except EdgeOPCError as exc:
        raise _fail(exc) from exc
    io.save_layout(out, fx.polygons, fx.width, fx.height)
    click.echo(f"wrote {out}")


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True)
def serve(host, port):
    """Run the HTTP service."""
    import uvicorn

    uvicorn.run("edgeopc.service.app:app", host=host, port=port)


if __name__ == "__main__":
    main()
