"""HTTP service wrapping the estimation pipeline.

Endpoints mirror the pipeline's entry points: /simulate writes a synthetic
scene to a server-side directory, /estimate runs the pipeline (on a scene
directory or an inline preset), /evaluate compares a trajectory against
ground truth, /ablate runs the three-variant ablation grid.  Responses
carry the full deterministic result documents so thin clients can persist
them locally.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from fastapi import FastAPI
from pydantic import BaseModel, Field

from . import __version__
from .errors import ArtiposeError, ConfigError
from .kinematics import JointTrajectory
from .pipeline import (
    ABLATION_VARIANTS,
    EvaluationReport,
    PipelineConfig,
    evaluate,
    run_ablation,
    run_pipeline,
    simulate_to_dir,
)
from .simulator import MANIFEST_NAME, PRESETS


class HealthResponse(BaseModel):
    status: str = "ok"
    version: str = __version__


class SimulateRequest(BaseModel):
    preset: str = "arm3"
    seed: int = 0
    frames: int = Field(default=15, ge=2)
    width: int = Field(default=128, ge=16)
    height: int = Field(default=96, ge=16)
    flow_noise_px: float = Field(default=0.0, ge=0.0)
    depth_noise: float = Field(default=0.0, ge=0.0)
    out_dir: str


class SimulateResponse(BaseModel):
    scene_dir: str
    frames: int
    dof: int
    preset: str


class EstimateRequest(BaseModel):
    input_dir: str | None = None
    preset: str | None = None
    seed: int = Field(default=0, ge=0)
    frames: int = Field(default=15, ge=2)
    width: int = Field(default=128, ge=16)
    height: int = Field(default=96, ge=16)
    flow_noise_px: float = Field(default=0.0, ge=0.0)
    depth_noise: float = Field(default=0.0, ge=0.0)
    no_depth: bool = False
    refine_iters: int = Field(default=10, ge=0)
    threshold_deg: float = Field(default=5.0, gt=0.0)
    out_dir: str | None = None
    emit_masks: bool = False
    emit_ply: bool = False
    emit_csv: bool = False
    overrides: dict = Field(default_factory=dict)

    def to_pipeline_config(self) -> PipelineConfig:
        base = PipelineConfig(
            input_dir=self.input_dir,
            preset=self.preset,
            seed=self.seed,
            frames=self.frames,
            width=self.width,
            height=self.height,
            flow_noise_px=self.flow_noise_px,
            depth_noise=self.depth_noise,
            use_depth=False if self.no_depth else None,
            refine_rounds=self.refine_iters,
            threshold_deg=self.threshold_deg,
            out_dir=self.out_dir,
            emit_masks=self.emit_masks,
            emit_ply=self.emit_ply,
            emit_csv=self.emit_csv,
        )
        if not self.overrides:
            return base
        merged = base.to_dict()
        for key, value in self.overrides.items():
            if isinstance(value, dict) and isinstance(merged.get(key), dict):
                unknown = set(value) - set(merged[key])
                if unknown:
                    raise ConfigError(f"unknown override keys in {key!r}: {sorted(unknown)}")
                merged[key].update(value)
            elif key in merged:
                merged[key] = value
            else:
                raise ConfigError(f"unknown override key {key!r}")
        return PipelineConfig.from_dict(merged)


class EstimateResponse(BaseModel):
    result: dict
    report: dict | None
    wall_time_s: float


class EvaluateRequest(BaseModel):
    trajectory_rad: list[list[float]] | None = None
    result_path: str | None = None
    gt_dir: str | None = None
    gt_trajectory_rad: list[list[float]] | None = None
    threshold_deg: float = Field(default=5.0, gt=0.0)


class EvaluateResponse(BaseModel):
    report: dict


class AblateRequest(BaseModel):
    preset: str = "arm3"
    seed: int = Field(default=0, ge=0)
    frames: int = Field(default=15, ge=2)
    width: int = Field(default=128, ge=16)
    height: int = Field(default=96, ge=16)
    flow_noise_px: float = Field(default=2.0, ge=0.0)
    depth_noise: float = Field(default=0.0, ge=0.0)
    refine_iters: int = Field(default=10, ge=0)
    variants: list[str] = Field(default_factory=lambda: list(ABLATION_VARIANTS))


class AblateResponse(BaseModel):
    rows: dict


def handle_simulate(req: SimulateRequest) -> SimulateResponse:
    if req.preset not in PRESETS:
        raise ConfigError(f"unknown preset {req.preset!r}; choose from {PRESETS}")
    manifest = simulate_to_dir(
        preset=req.preset,
        seed=req.seed,
        frames=req.frames,
        out_dir=req.out_dir,
        width=req.width,
        height=req.height,
        flow_noise_px=req.flow_noise_px,
        depth_noise=req.depth_noise,
    )
    return SimulateResponse(
        scene_dir=req.out_dir,
        frames=manifest["frames"],
        dof=len(manifest["chain"]["joints"]),
        preset=req.preset,
    )


def handle_estimate(req: EstimateRequest) -> EstimateResponse:
    cfg = req.to_pipeline_config()
    res = run_pipeline(cfg)
    return EstimateResponse(
        result=res.result_doc,
        report=None if res.report is None else res.report.to_dict(include_wall_time=True),
        wall_time_s=res.wall_time_s,
    )


def _trajectory_from_request(req: EvaluateRequest) -> np.ndarray:
    if req.trajectory_rad is not None:
        return np.asarray(req.trajectory_rad, dtype=float)
    if req.result_path is not None:
        doc = json.loads(Path(req.result_path).read_text())
        return np.asarray(doc["trajectory_rad"], dtype=float)
    raise ConfigError("provide trajectory_rad or result_path")


def _gt_from_request(req: EvaluateRequest) -> np.ndarray:
    if req.gt_trajectory_rad is not None:
        return np.asarray(req.gt_trajectory_rad, dtype=float)
    if req.gt_dir is not None:
        man = json.loads((Path(req.gt_dir) / MANIFEST_NAME).read_text())
        sched = np.asarray(man["schedule_rad"], dtype=float)
        return sched - sched[0]
    raise ConfigError("provide gt_trajectory_rad or gt_dir")


def handle_evaluate(req: EvaluateRequest) -> EvaluateResponse:
    est = _trajectory_from_request(req)
    gt = _gt_from_request(req)
    if est.shape != gt.shape:
        raise ConfigError(f"trajectory shape {est.shape} does not match ground truth {gt.shape}")
    report: EvaluationReport = evaluate(
        JointTrajectory(est, np.ones_like(est)),
        JointTrajectory(gt, np.ones_like(gt)),
        req.threshold_deg,
    )
    return EvaluateResponse(report=report.to_dict())


def handle_ablate(req: AblateRequest) -> AblateResponse:
    cfg = PipelineConfig(
        preset=req.preset,
        seed=req.seed,
        frames=req.frames,
        width=req.width,
        height=req.height,
        flow_noise_px=req.flow_noise_px,
        depth_noise=req.depth_noise,
        refine_rounds=req.refine_iters,
    )
    return AblateResponse(rows=run_ablation(cfg, tuple(req.variants)))


def create_app() -> FastAPI:
    app = FastAPI(title="artipose", version=__version__)

    @app.exception_handler(ArtiposeError)
    async def _artipose_error(_request, exc: ArtiposeError):
        from fastapi.responses import JSONResponse

        return JSONResponse(status_code=400, content={"detail": str(exc)})

    @app.get("/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return HealthResponse()

    @app.post("/simulate", response_model=SimulateResponse)
    def simulate(req: SimulateRequest) -> SimulateResponse:
        return handle_simulate(req)

    @app.post("/estimate", response_model=EstimateResponse)
    def estimate(req: EstimateRequest) -> EstimateResponse:
        return handle_estimate(req)

    @app.post("/evaluate", response_model=EvaluateResponse)
    def evaluate_endpoint(req: EvaluateRequest) -> EvaluateResponse:
        return handle_evaluate(req)

    @app.post("/ablate", response_model=AblateResponse)
    def ablate(req: AblateRequest) -> AblateResponse:
        return handle_ablate(req)

    return app


app = create_app()
