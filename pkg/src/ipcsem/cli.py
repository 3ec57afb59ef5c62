"""Command-line client for the modeling service.

Commands run against an in-process service instance by default; pass
``--server URL`` (or set IPCSEM_SERVER) to talk to a running deployment
instead.  File reading/writing happens client-side; the service sees only
JSON payloads.

Exit codes: 0 ok, 2 input/parse error, 3 data error, 4 convergence failure.
"""

from __future__ import annotations

import json
import math
import sys
import time
from pathlib import Path

import click
import httpx
import pandas as pd

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_DATA = 3
EXIT_CONVERGENCE = 4

_ERROR_EXIT_CODES = {
    "parse": EXIT_INPUT,
    "data": EXIT_DATA,
    "convergence": EXIT_CONVERGENCE,
    "internal": EXIT_DATA,
}


def _make_client(server: str | None) -> httpx.Client:
    if server:
        return httpx.Client(base_url=server, timeout=None)
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DeprecationWarning)
        from fastapi.testclient import TestClient

    from .service.app import create_app

    return TestClient(create_app())


def _fail(message: str, code: int):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _post(client: httpx.Client, path: str, payload: dict) -> dict:
    response = client.post(path, json=payload)
    if response.status_code == 200:
        return response.json()
    try:
        detail = response.json().get("detail")
    except ValueError:
        detail = None
    if isinstance(detail, dict) and "error_type" in detail:
        message = detail.get("message", "request failed")
        if detail.get("line") is not None:
            message = f"{message} (line {detail['line']})"
        _fail(message, _ERROR_EXIT_CODES.get(detail["error_type"], EXIT_DATA))
    _fail(f"request failed with status {response.status_code}: {response.text}", EXIT_INPUT)


def _read_text(path: str) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        _fail(f"cannot read {path}: {exc}", EXIT_INPUT)


def _read_table(path: str) -> dict:
    try:
        # round_trip parsing keeps re-ingested outputs bit-identical
        frame = pd.read_csv(path, float_precision="round_trip")
    except OSError as exc:
        _fail(f"cannot read {path}: {exc}", EXIT_INPUT)
    except Exception as exc:  # malformed CSV
        _fail(f"cannot parse CSV {path}: {exc}", EXIT_DATA)
    if frame.columns.size == 0 or len(frame) == 0:
        _fail(f"{path} contains no data rows", EXIT_DATA)
    rows = []
    for column in frame.columns:
        try:
            frame[column] = pd.to_numeric(frame[column])
        except (ValueError, TypeError):
            _fail(f"column {column!r} in {path} is not numeric", EXIT_DATA)
    for row in frame.itertuples(index=False, name=None):
        rows.append(
            [None if (isinstance(v, float) and not math.isfinite(v)) else float(v) for v in row]
        )
    return {"columns": [str(c) for c in frame.columns], "rows": rows}


def _write_json(path: str, payload: dict) -> None:
    Path(path).write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _write_table_csv(path: str, table: dict) -> None:
    frame = pd.DataFrame(table["rows"], columns=table["columns"])
    frame.to_csv(path, index=False)


def _report(command: str, elapsed: float, warnings: list[str], artifacts: list[str]):
    click.echo(f"command: {command}")
    click.echo(f"elapsed_seconds: {elapsed:.3f}")
    for warning in warnings:
        click.echo(f"warning: {warning}")
    for artifact in artifacts:
        click.echo(f"wrote: {artifact}")


def _split_list(value: str | None) -> list[str]:
    if not value:
        return []
    return [part.strip() for part in value.split(",") if part.strip()]


@click.group()
@click.option(
    "--server",
    envvar="IPCSEM_SERVER",
    default=None,
    help="URL of a running service; default runs the service in-process.",
)
@click.pass_context
def main(ctx, server):
    """Covariance-structure modeling and IPC regression."""
    ctx.ensure_object(dict)
    ctx.obj["server"] = server


@main.command()
@click.argument("model_file", type=click.Path())
@click.argument("data_csv", type=click.Path())
@click.argument("out_json", type=click.Path())
@click.pass_context
def fit(ctx, model_file, data_csv, out_json):
    """Fit the model in MODEL_FILE to DATA_CSV; write estimates to OUT_JSON."""
    started = time.perf_counter()
    payload = {"model_text": _read_text(model_file), "data": _read_table(data_csv)}
    with _make_client(ctx.obj["server"]) as client:
        result = _post(client, "/fit", payload)
    _write_json(out_json, result)
    _report("fit", time.perf_counter() - started, result.get("warnings", []), [out_json])


@main.command()
@click.argument("model_file", type=click.Path())
@click.argument("data_csv", type=click.Path())
@click.argument("out_csv", type=click.Path())
@click.option(
    "--centering",
    type=click.Choice(["raw", "anchored"]),
    default="anchored",
    show_default=True,
)
@click.option("--prefix", default="ipc.", show_default=True)
@click.pass_context
def ipc(ctx, model_file, data_csv, out_csv, centering, prefix):
    """Write DATA_CSV plus one IPC column per free parameter to OUT_CSV."""
    started = time.perf_counter()
    payload = {
        "model_text": _read_text(model_file),
        "data": _read_table(data_csv),
        "centering": centering,
        "prefix": prefix,
    }
    with _make_client(ctx.obj["server"]) as client:
        result = _post(client, "/ipc", payload)
    _write_table_csv(out_csv, result["table"])
    _report("ipc", time.perf_counter() - started, [], [out_csv])


@main.command()
@click.argument("ipc_csv", type=click.Path())
@click.argument("out_json", type=click.Path())
@click.option("--params", required=True, help="Comma-separated IPC column names.")
@click.option("--covariates", default="", help="Comma-separated covariate columns.")
@click.option("--prefix", default="ipc.", show_default=True)
@click.pass_context
def regress(ctx, ipc_csv, out_json, params, covariates, prefix):
    """Regress IPC columns from IPC_CSV on covariates (robust SEs)."""
    started = time.perf_counter()
    payload = {
        "data": _read_table(ipc_csv),
        "params": _split_list(params),
        "covariates": _split_list(covariates),
        "prefix": prefix,
    }
    with _make_client(ctx.obj["server"]) as client:
        result = _post(client, "/regress", payload)
    _write_json(out_json, result)
    _report("regress", time.perf_counter() - started, [], [out_json])


@main.command()
@click.argument("model_file", type=click.Path())
@click.argument("data_csv", type=click.Path())
@click.argument("out_json", type=click.Path())
@click.option("--group", "group_column", required=True, help="Grouping column name.")
@click.option(
    "--constraints",
    type=click.Choice(["all_equal", "free"]),
    default="all_equal",
    show_default=True,
)
@click.option(
    "--ipc-out",
    type=click.Path(),
    default=None,
    help="Also write the group-centered IPC dataset (all_equal only).",
)
@click.pass_context
def mgsem(ctx, model_file, data_csv, out_json, group_column, constraints, ipc_out):
    """Multiple-group fit with EPC/MI table under equality constraints."""
    started = time.perf_counter()
    payload = {
        "model_text": _read_text(model_file),
        "data": _read_table(data_csv),
        "group_column": group_column,
        "constraints": constraints,
        "ipc_table": ipc_out is not None,
    }
    with _make_client(ctx.obj["server"]) as client:
        result = _post(client, "/mgsem", payload)
    artifacts = [out_json]
    ipc_table = result.pop("ipc_table", None)
    if ipc_out is not None and ipc_table is not None:
        _write_table_csv(ipc_out, ipc_table)
        artifacts.append(ipc_out)
    _write_json(out_json, result)
    _report("mgsem", time.perf_counter() - started, result.get("warnings", []), artifacts)


@main.command()
@click.argument("config_file", type=click.Path())
@click.argument("out_dir", type=click.Path())
@click.option("--threads", type=int, default=None, help="Worker processes (default: IPC_SEM_THREADS or CPU count).")
@click.pass_context
def simulate(ctx, config_file, out_dir, threads):
    """Run the Monte Carlo study described by CONFIG_FILE into OUT_DIR."""
    started = time.perf_counter()
    try:
        config = json.loads(_read_text(config_file))
    except json.JSONDecodeError as exc:
        _fail(f"cannot parse config {config_file}: {exc}", EXIT_INPUT)
    if not isinstance(config, dict):
        _fail("config must be a JSON object", EXIT_INPUT)
    if threads is not None:
        config["threads"] = threads
    with _make_client(ctx.obj["server"]) as client:
        result = _post(client, "/simulate", config)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    artifacts = []
    for name, key in (
        ("summary.csv", "summary_csv"),
        ("replications.csv", "replications_csv"),
        ("type1.csv", "type1_csv"),
    ):
        text = result.get(key, "")
        if text:
            (out / name).write_text(text, encoding="utf-8")
            artifacts.append(str(out / name))
    _report("simulate", time.perf_counter() - started, [], artifacts)
    click.echo(f"excluded_replications: {result['n_excluded']}")


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True, type=int)
def serve(host, port):
    """Run the HTTP service with uvicorn."""
    import uvicorn

    from .service.app import create_app

    uvicorn.run(create_app(), host=host, port=port)


if __name__ == "__main__":
    main()
