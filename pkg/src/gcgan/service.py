"""HTTP inference service: generation, redirection, component edits, and
asynchronous inversion jobs over loaded model bundles."""
from __future__ import annotations

import base64
import io
import threading
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np
import torch
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from PIL import Image
from pydantic import BaseModel

from . import __version__
from .checkpoint import ModelBundle, load_bundle
from .core import GAZE_COMPONENTS, GazeDirection, palette_for
from .errors import GCGANError
from .generator import CompositionalGenerator, LatentCode
from .inversion import InversionConfig, invert

GAZE_RANGE_SLACK = 1e-6


class ApiError(Exception):
    def __init__(self, status: int, code: str, message: str):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message


@dataclass
class ModelEntry:
    model_id: str
    bundle: ModelBundle
    generator: CompositionalGenerator
    gaze_lo: np.ndarray
    gaze_hi: np.ndarray

    @staticmethod
    def from_bundle(model_id: str, bundle: ModelBundle) -> "ModelEntry":
        gen = bundle.build_generator()
        stats = bundle.gaze_stats()
        return ModelEntry(
            model_id=model_id,
            bundle=bundle,
            generator=gen,
            gaze_lo=stats.min(axis=0) - GAZE_RANGE_SLACK,
            gaze_hi=stats.max(axis=0) + GAZE_RANGE_SLACK,
        )

    def check_gaze(self, gaze: GazeDirection) -> None:
        arr = gaze.as_array()
        if (arr < self.gaze_lo).any() or (arr > self.gaze_hi).any():
            raise ApiError(422, "gaze_out_of_range",
                           f"gaze {list(arr)} outside training range "
                           f"[{self.gaze_lo.tolist()}, {self.gaze_hi.tolist()}]")


@dataclass
class StoredLatent:
    latent_id: str
    model_id: str
    code: LatentCode  # never mutated; edits create new entries
    gaze: GazeDirection


@dataclass
class Job:
    job_id: str
    status: str = "queued"  # queued | running | done | failed
    result: Optional[dict] = None
    error: Optional[str] = None


@dataclass
class SessionState:
    """Registry of loaded models plus latent handles and inversion jobs."""

    models: dict[str, ModelEntry] = field(default_factory=dict)
    latents: dict[str, StoredLatent] = field(default_factory=dict)
    jobs: dict[str, Job] = field(default_factory=dict)
    token: Optional[str] = None
    workers: int = 2
    started_at: float = field(default_factory=time.time)
    lock: threading.Lock = field(default_factory=threading.Lock)
    executor: Optional[ThreadPoolExecutor] = None

    def __post_init__(self) -> None:
        if self.executor is None:
            self.executor = ThreadPoolExecutor(max_workers=self.workers)

    def model(self, model_id: str) -> ModelEntry:
        entry = self.models.get(model_id)
        if entry is None:
            raise ApiError(404, "unknown_model", f"model {model_id!r} is not loaded")
        return entry

    def latent(self, latent_id: str) -> StoredLatent:
        with self.lock:
            entry = self.latents.get(latent_id)
        if entry is None:
            raise ApiError(404, "unknown_latent", f"latent {latent_id!r} does not exist")
        return entry

    def store_latent(self, model_id: str, code: LatentCode, gaze: GazeDirection) -> StoredLatent:
        latent_id = uuid.uuid4().hex[:16]
        entry = StoredLatent(latent_id=latent_id, model_id=model_id, code=code.detach().clone(), gaze=gaze)
        with self.lock:
            self.latents[latent_id] = entry
        return entry


def build_state(
    model_paths: dict[str, str | Path], token: Optional[str] = None, workers: int = 2
) -> SessionState:
    state = SessionState(token=token, workers=workers)
    for model_id, path in model_paths.items():
        state.models[model_id] = ModelEntry.from_bundle(model_id, load_bundle(path))
    return state


# ---------------------------------------------------------------------------
# Payload encoding


def _png_b64(arr: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def _mask_png_b64(grid: np.ndarray, classes) -> str:
    img = Image.fromarray(grid.astype(np.uint8), mode="P")
    img.putpalette(palette_for(classes))
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def _render_payload(entry: ModelEntry, stored: StoredLatent, gaze: GazeDirection, return_mask: bool) -> dict:
    with torch.no_grad():
        pair = entry.generator.generate(stored.code, gaze)
    payload = {
        "latent_id": stored.latent_id,
        "model_id": entry.model_id,
        "gaze": [gaze.yaw, gaze.pitch],
        "image": _png_b64(pair.image_uint8()[0]),
    }
    if return_mask:
        mask = pair.hard_masks(entry.generator.cfg.components)[0]
        payload["mask"] = _mask_png_b64(mask.grid, mask.classes)
        payload["mask_classes"] = list(mask.classes)
    return payload


# ---------------------------------------------------------------------------
# Request schemas


class GenerateRequest(BaseModel):
    model_id: str
    gaze: Optional[list[float]] = None
    seed: Optional[int] = None
    latent_id: Optional[str] = None
    return_mask: bool = False


class RedirectRequest(BaseModel):
    latent_id: str
    gaze: Optional[list[float]] = None
    return_mask: bool = False
    # Render the same latent under another loaded model (domain comparison).
    model_id: Optional[str] = None


class EditRequest(BaseModel):
    latent_id: str
    component: str
    action: str = "resample"  # resample | set
    seed: Optional[int] = None
    values: Optional[list[float]] = None
    part: str = "both"
    force: bool = False
    return_mask: bool = False


class InvertRequest(BaseModel):
    model_id: str
    image: str  # base64 PNG at model resolution
    gaze: Optional[list[float]] = None
    config: Optional[dict[str, Any]] = None


def _parse_gaze(raw: Optional[list[float]]) -> GazeDirection:
    if raw is None or len(raw) != 2:
        raise ApiError(422, "missing_gaze", "request requires gaze: [yaw, pitch] in radians")
    try:
        return GazeDirection.validate(raw[0], raw[1])
    except ValueError as exc:
        raise ApiError(422, "bad_gaze", str(exc)) from exc


def create_app(state: SessionState) -> FastAPI:
    app = FastAPI(title="gcgan inference service", version=__version__)

    @app.exception_handler(ApiError)
    async def _api_error(_req: Request, exc: ApiError):
        return JSONResponse(
            status_code=exc.status, content={"error": {"code": exc.code, "message": exc.message}}
        )

    @app.exception_handler(Exception)
    async def _unexpected(_req: Request, exc: Exception):
        return JSONResponse(
            status_code=500, content={"error": {"code": "internal", "message": str(exc)}}
        )

    def check_token(request: Request) -> None:
        if state.token is not None and request.headers.get("x-api-token") != state.token:
            raise ApiError(401, "unauthorized", "missing or invalid X-API-Token header")

    @app.get("/health")
    async def health():
        return {"status": "ok", "version": __version__, "uptime_s": time.time() - state.started_at}

    @app.get("/models")
    async def models():
        return [
            {
                "id": entry.model_id,
                "stage": entry.bundle.stage,
                "resolution": entry.generator.cfg.resolution,
                "components": list(entry.generator.cfg.components),
                "gaze_range": [entry.gaze_lo.tolist(), entry.gaze_hi.tolist()],
            }
            for entry in state.models.values()
        ]

    @app.post("/generate")
    async def generate(req: GenerateRequest, request: Request):
        check_token(request)
        entry = state.model(req.model_id)
        gaze = _parse_gaze(req.gaze)
        entry.check_gaze(gaze)
        if req.latent_id is not None:
            stored = state.latent(req.latent_id)
        else:
            seed = req.seed if req.seed is not None else int.from_bytes(uuid.uuid4().bytes[:4], "little")
            z = torch.randn(1, entry.generator.cfg.z_dim, generator=torch.Generator().manual_seed(seed))
            with torch.no_grad():
                code = entry.generator.map_latent(z)
            stored = state.store_latent(req.model_id, code, gaze)
        return _render_payload(entry, stored, gaze, req.return_mask)

    @app.post("/redirect")
    async def redirect(req: RedirectRequest, request: Request):
        check_token(request)
        stored = state.latent(req.latent_id)
        home = state.model(stored.model_id)
        entry = state.model(req.model_id) if req.model_id else home
        if entry.generator.cfg.components != home.generator.cfg.components:
            raise ApiError(422, "model_mismatch", "models do not share latent geometry")
        gaze = _parse_gaze(req.gaze)
        entry.check_gaze(gaze)
        payload = _render_payload(entry, stored, gaze, req.return_mask)
        if entry.model_id != home.model_id:
            with torch.no_grad():
                mask_home = home.generator.generate(stored.code, gaze).mask
                mask_other = entry.generator.generate(stored.code, gaze).mask
            payload["mask_mse_vs_home"] = float(((mask_home - mask_other) ** 2).mean())
        return payload

    @app.post("/edit")
    async def edit(req: EditRequest, request: Request):
        check_token(request)
        stored = state.latent(req.latent_id)
        entry = state.model(stored.model_id)
        cfg = entry.generator.cfg
        if req.component not in cfg.components:
            raise ApiError(422, "unknown_component", f"component {req.component!r} not in {cfg.components}")
        if req.component in GAZE_COMPONENTS and not req.force:
            raise ApiError(409, "gaze_label_risk",
                           f"editing {req.component!r} changes the rendered gaze; retry with force=true")
        if req.action == "resample":
            from .augmentation import resample_component

            seed = req.seed if req.seed is not None else int.from_bytes(uuid.uuid4().bytes[:4], "little")
            code = resample_component(entry.generator, stored.code, req.component, seed=seed,
                                      part=req.part, force_gaze_components=True)
        elif req.action == "set":
            if req.values is None:
                raise ApiError(422, "missing_values", "action=set requires values")
            value = torch.tensor(req.values, dtype=torch.float32).unsqueeze(0)
            expected = cfg.w_dim if req.part == "both" else cfg.half_dim
            if value.shape[1] != expected:
                raise ApiError(422, "bad_values", f"expected {expected} values for part {req.part!r}")
            code = stored.code.replace_local(req.component, value, part=req.part)
        else:
            raise ApiError(422, "unknown_action", f"action {req.action!r} not supported")
        new_stored = state.store_latent(stored.model_id, code, stored.gaze)
        payload = _render_payload(entry, new_stored, stored.gaze, req.return_mask)
        payload["parent_latent_id"] = stored.latent_id
        return payload

    @app.post("/invert")
    async def invert_endpoint(req: InvertRequest, request: Request):
        check_token(request)
        entry = state.model(req.model_id)
        try:
            raw = base64.b64decode(req.image)
            img = Image.open(io.BytesIO(raw)).convert("RGB")
        except Exception as exc:  # noqa: BLE001
            raise ApiError(422, "bad_image", f"image is not decodable: {exc}") from exc
        if img.size != (entry.generator.cfg.resolution, entry.generator.cfg.resolution):
            raise ApiError(422, "bad_image",
                           f"image must be {entry.generator.cfg.resolution}px square, got {img.size}")
        arr = np.asarray(img, dtype=np.float32).transpose(2, 0, 1) / 127.5 - 1.0
        target = torch.from_numpy(arr)
        gaze = None
        if req.gaze is not None:
            gaze = _parse_gaze(req.gaze)
            entry.check_gaze(gaze)
        cfg = InversionConfig(**(req.config or {}))

        job = Job(job_id=uuid.uuid4().hex[:16])
        with state.lock:
            state.jobs[job.job_id] = job

        def run() -> None:
            job.status = "running"
            try:
                result = invert(target, gaze, entry.generator, cfg)
                stored = state.store_latent(req.model_id, result.latent, result.gaze)
                job.result = {"latent_id": stored.latent_id, "report": result.report.to_dict(),
                              "gaze": [result.gaze.yaw, result.gaze.pitch]}
                job.status = "done"
            except Exception as exc:  # noqa: BLE001
                job.error = str(exc)
                job.status = "failed"

        state.executor.submit(run)
        return {"job_id": job.job_id, "status": job.status}

    @app.get("/jobs/{job_id}")
    async def job_status(job_id: str, request: Request):
        check_token(request)
        with state.lock:
            job = state.jobs.get(job_id)
        if job is None:
            raise ApiError(404, "unknown_job", f"job {job_id!r} does not exist")
        payload = {"job_id": job.job_id, "status": job.status}
        if job.result is not None:
            payload["result"] = job.result
        if job.error is not None:
            payload["error"] = job.error
        return payload

    @app.get("/latents/{latent_id}")
    async def latent_info(latent_id: str, request: Request):
        check_token(request)
        stored = state.latent(latent_id)
        return {
            "latent_id": stored.latent_id,
            "model_id": stored.model_id,
            "gaze": [stored.gaze.yaw, stored.gaze.pitch],
            "latent": stored.code.to_json(),
        }

    return app


def serve(model_paths: dict[str, str], host: str = "127.0.0.1", port: int = 8000,
          token: Optional[str] = None, workers: int = 2) -> None:
    import uvicorn

    state = build_state(model_paths, token=token, workers=workers)
    uvicorn.run(create_app(state), host=host, port=port)
