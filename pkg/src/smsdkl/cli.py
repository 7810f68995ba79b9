"""Command-line client of the smsdkl service.

Without ``--url`` requests go to an in-process instance of the app, so the
CLI works without a running server.  With ``--url`` they go over HTTP to a
server started by ``smsdkl serve``; paths are then resolved on the server.
"""

from __future__ import annotations

import json
import sys
import warnings
from pathlib import Path

import click
import httpx
import yaml
from pydantic import ValidationError

from .bench.config import load_config


def _client(url: str | None, timeout: float):
    if url:
        return httpx.Client(base_url=url, timeout=timeout)
    with warnings.catch_warnings():
        # starlette nudges towards a renamed httpx fork; behaviour is unchanged
        warnings.filterwarnings("ignore", message="Using `httpx` with")
        from fastapi.testclient import TestClient

    from .service.app import app

    return TestClient(app)


def _post(ctx, path: str, payload: dict) -> dict:
    with _client(ctx.obj["url"], ctx.obj["timeout"]) as client:
        resp = client.post(path, json=payload)
    if resp.status_code >= 400:
        try:
            detail = resp.json().get("detail", resp.text)
        except ValueError:
            detail = resp.text
        raise click.ClickException(f"{path} failed ({resp.status_code}): {detail}")
    return resp.json()


@click.group()
@click.option("--url", envvar="SMSDKL_URL", default=None, help="Service base URL; omit to run in-process.")
@click.option("--timeout", default=3600.0, show_default=True, help="HTTP timeout in seconds.")
@click.pass_context
def main(ctx, url, timeout):
    """Stepwise model selection with deep kernel learning."""
    ctx.obj = {"url": url, "timeout": timeout}


@main.command()
@click.argument("config", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--out", "out_dir", type=click.Path(file_okay=False, path_type=Path), default=None,
              help="Bundle directory (default: ./<name>-bundle).")
@click.pass_context
def run(ctx, config, out_dir):
    """Run the experiment described by CONFIG and write a result bundle."""
    try:
        cfg = load_config(config)
    except (ValidationError, yaml.YAMLError) as err:
        raise click.ClickException(f"invalid config {config}:\n{err}") from err
    out_dir = out_dir or Path(f"{cfg.name}-bundle")
    res = _post(ctx, "/experiments", {"config": cfg.model_dump(), "out_dir": str(out_dir.resolve())})
    click.echo(f"bundle: {res['out_dir']}")
    click.echo(f"runs: {len(res['runs'])}  errors: {len(res['errors'])}")
    for e in res["errors"]:
        click.echo(f"  failed {e['algorithm']} seed {e['seed']}: {e['error']}", err=True)
    agg = Path(res["out_dir"]) / "aggregate.csv"
    if agg.exists():
        click.echo(agg.read_text().rstrip())


@main.command()
@click.option("--only", multiple=True, help="Run only the named check (repeatable).")
@click.option("--json", "as_json", is_flag=True, help="Print the raw response.")
@click.pass_context
def check(ctx, only, as_json):
    """Run the oracle self-test suite."""
    res = _post(ctx, "/check", {"names": list(only) or None})
    if as_json:
        click.echo(json.dumps(res, indent=2))
    else:
        for r in res["results"]:
            click.echo(f"{'PASS' if r['passed'] else 'FAIL'}  {r['name']:<24} {r['detail']}  ({r['seconds']:.2f}s)")
    if not res["passed"]:
        sys.exit(1)


@main.command()
@click.argument("bundle", type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.pass_context
def plot(ctx, bundle):
    """Write SVG convergence plots for a result BUNDLE."""
    res = _post(ctx, "/plot", {"bundle": str(bundle.resolve())})
    for f in res["files"]:
        click.echo(f)


@main.command()
@click.argument("history", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--top-k", default=20, show_default=True, help="Models averaged per step in the trajectory trace.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False, path_type=Path), default=None,
              help="Directory for diagnostic CSVs (default: <history stem>_diag next to the history).")
@click.pass_context
def diag(ctx, history, top_k, out_dir):
    """Correlation matrix, embedding trace and top-k trajectory of a run HISTORY."""
    out_dir = out_dir or history.with_name(f"{history.stem}_diag")
    res = _post(ctx, "/diag", {"history": str(history.resolve()), "top_k": top_k, "out_dir": str(out_dir.resolve())})
    click.echo(f"steps: {res['T']}  acquisitions: {res['n']}")
    if res["mean_offdiag"] is not None:
        click.echo(f"mean off-diagonal performance correlation: {res['mean_offdiag']:.4f}")
    click.echo("correlation matrix:")
    for row in res["corr"]:
        click.echo("  " + " ".join("   nan" if v is None else f"{v:6.3f}" for v in row))
    if res["embeddings"] is not None:
        click.echo("embedding trace: " + " ".join(f"{z[0]:.4f}" for z in res["embeddings"]))
    for f in res["files"]:
        click.echo(f)


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True)
def serve(host, port):
    """Start the HTTP service."""
    import uvicorn

    uvicorn.run("smsdkl.service.app:app", host=host, port=port)


if __name__ == "__main__":
    main()
