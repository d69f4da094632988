"""Command-line client for the estimation service.

Every subcommand builds the same request models the HTTP service consumes.
By default requests are executed in-process; with ``--server URL`` they are
POSTed to a running service instead, and the returned result documents are
written locally when ``--out`` is given.
"""

from __future__ import annotations

import json
from pathlib import Path

import click

from .errors import ArtiposeError
from .service import (
    AblateRequest,
    EstimateRequest,
    EvaluateRequest,
    SimulateRequest,
    handle_ablate,
    handle_estimate,
    handle_evaluate,
    handle_simulate,
)
from .simulator import PRESETS


def _dispatch(server: str | None, path: str, request, handler):
    """Run a request against a remote server or the in-process handlers."""
    if server is None:
        try:
            return handler(request).model_dump()
        except ArtiposeError as exc:
            raise click.ClickException(str(exc)) from exc
    import httpx

    resp = httpx.post(server.rstrip("/") + path, json=request.model_dump(), timeout=600.0)
    if resp.status_code != 200:
        raise click.ClickException(f"server returned {resp.status_code}: {resp.text}")
    return resp.json()


def _echo_json(payload: dict) -> None:
    click.echo(json.dumps(payload, indent=2, sort_keys=True))


@click.group()
@click.option("--server", default=None, help="Base URL of a running artipose service.")
@click.pass_context
def main(ctx: click.Context, server: str | None):
    """Joint-angle trajectory estimation for articulated rigid-body scenes."""
    ctx.ensure_object(dict)
    ctx.obj["server"] = server


@main.command()
@click.option("--preset", type=click.Choice(PRESETS), default="arm3", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--frames", type=int, default=15, show_default=True)
@click.option("--width", type=int, default=128, show_default=True)
@click.option("--height", type=int, default=96, show_default=True)
@click.option("--flow-noise", "flow_noise_px", type=float, default=0.0, show_default=True,
              help="Gaussian noise sigma added to the emitted flow (px).")
@click.option("--depth-noise", "depth_noise", type=float, default=0.0, show_default=True,
              help="Gaussian noise sigma added to the emitted depth (scene units).")
@click.option("--out", "out_dir", required=True, type=click.Path(), help="Scene output directory.")
@click.pass_context
def simulate(ctx, **kwargs):
    """Generate a synthetic scene with ground-truth flow, depth, and masks."""
    req = SimulateRequest(**kwargs)
    payload = _dispatch(ctx.obj["server"], "/simulate", req, handle_simulate)
    _echo_json(payload)


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="JSON file with EstimateRequest fields (overridden by flags).")
@click.option("--input", "input_dir", type=click.Path(), default=None,
              help="Scene directory produced by `simulate`.")
@click.option("--preset", type=click.Choice(PRESETS), default=None,
              help="Simulate this preset in memory instead of reading a directory.")
@click.option("--seed", type=int, default=None)
@click.option("--frames", type=int, default=None)
@click.option("--flow-noise", "flow_noise_px", type=float, default=None)
@click.option("--depth-noise", "depth_noise", type=float, default=None)
@click.option("--refine-iters", type=int, default=None,
              help="Epipolar+photometric flow refinement rounds per pair [default: 10].")
@click.option("--no-depth", is_flag=True, default=False, help="Ignore depth even when available.")
@click.option("--out", "out_dir", type=click.Path(), default=None, help="Result output directory.")
@click.option("--emit-masks", is_flag=True, default=False, help="Write the last pair's label mask.")
@click.option("--emit-ply", is_flag=True, default=False, help="Write the accumulated cloud as PLY.")
@click.option("--emit-csv", is_flag=True, default=False, help="Write the trajectory as CSV.")
@click.pass_context
def estimate(ctx, config_path, **kwargs):
    """Estimate the joint-angle trajectory of a scene."""
    fields = {}
    if config_path:
        fields.update(json.loads(Path(config_path).read_text()))
    for key, value in kwargs.items():
        if key == "no_depth":
            if value:
                fields["no_depth"] = True
        elif value is not None:
            fields[key] = value
    if "refine_iters" not in fields:
        fields.setdefault("refine_iters", 10)
    req = EstimateRequest(**fields)
    payload = _dispatch(ctx.obj["server"], "/estimate", req, handle_estimate)
    if kwargs.get("out_dir") and ctx.obj["server"] is not None:
        out = Path(kwargs["out_dir"])
        out.mkdir(parents=True, exist_ok=True)
        (out / "result.json").write_text(json.dumps(payload["result"], indent=2, sort_keys=True))
    summary = {"report": payload["report"], "wall_time_s": payload["wall_time_s"]}
    if payload["report"] is None:
        summary["trajectory_rad"] = payload["result"]["trajectory_rad"]
    _echo_json(summary)


@main.command()
@click.option("--result", "result_path", type=click.Path(exists=True), required=True,
              help="result.json emitted by `estimate`.")
@click.option("--gt", "gt_dir", type=click.Path(exists=True), required=True,
              help="Scene directory holding the ground-truth manifest.")
@click.option("--threshold-deg", type=float, default=5.0, show_default=True)
@click.pass_context
def evaluate(ctx, result_path, gt_dir, threshold_deg):
    """Compare an emitted trajectory against a scene's ground truth."""
    req = EvaluateRequest(result_path=result_path, gt_dir=gt_dir, threshold_deg=threshold_deg)
    payload = _dispatch(ctx.obj["server"], "/evaluate", req, handle_evaluate)
    _echo_json(payload)


@main.command()
@click.option("--preset", type=click.Choice(PRESETS), default="arm3", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--frames", type=int, default=15, show_default=True)
@click.option("--flow-noise", "flow_noise_px", type=float, default=2.0, show_default=True)
@click.option("--depth-noise", "depth_noise", type=float, default=0.0, show_default=True)
@click.option("--refine-iters", "refine_iters", type=int, default=10, show_default=True)
@click.pass_context
def ablate(ctx, **kwargs):
    """Run the flow / +epipolar / +depth ablation grid on one scene."""
    req = AblateRequest(**kwargs)
    payload = _dispatch(ctx.obj["server"], "/ablate", req, handle_ablate)
    _echo_json(payload)


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8000, show_default=True)
def serve(host, port):
    """Run the HTTP service."""
    import uvicorn

    uvicorn.run("artipose.service:app", host=host, port=port)


if __name__ == "__main__":
    main(obj={})
