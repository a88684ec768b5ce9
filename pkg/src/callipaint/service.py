"""HTTP inference service.

Stateless JSON-over-HTTP endpoints for conditional sampling and
mask-conditioned inpainting. Requests carry explicit seeds (or the server
draws one and echoes it back), so every response is reproducible from its
request plus the checkpoint id. Generation runs on a fixed-size worker pool
with a bounded FIFO queue; overflow is refused with 429.
"""

from __future__ import annotations

import base64
import binascii
import hashlib
import os
import queue
import threading
import time
from concurrent.futures import Future
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from . import repaint
from .corpus import GlyphImage, Mask
from .denoiser import Checkpoint, load_checkpoint
from .diffusion import make_schedule, sample as diffusion_sample

__all__ = ["ModelBundle", "JobQueue", "QueueFullError", "create_app", "serve"]

DEFAULT_BIND = "127.0.0.1:8080"
DEFAULT_WORKERS = 2
DEFAULT_MAX_PENDING = 16


class QueueFullError(RuntimeError):
    """The pending queue is at capacity."""


class JobQueue:
    """Fixed worker pool with a bounded FIFO queue of pending jobs.

    At most ``workers`` jobs run at once; up to ``max_pending`` more wait in
    arrival order. ``submit`` raises QueueFullError beyond that.
    """

    def __init__(self, workers: int, max_pending: int):
        if workers < 1 or max_pending < 0:
            raise ValueError("workers >= 1 and max_pending >= 0 required")
        self._queue: queue.Queue = queue.Queue(maxsize=workers + max_pending)
        self._threads = [
            threading.Thread(target=self._run, name=f"gen-worker-{i}", daemon=True)
            for i in range(workers)
        ]
        for t in self._threads:
            t.start()

    def _run(self):
        while True:
            item = self._queue.get()
            if item is None:
                return
            fn, fut = item
            if not fut.set_running_or_notify_cancel():
                continue
            try:
                fut.set_result(fn())
            except BaseException as exc:  # propagate to the waiting request
                fut.set_exception(exc)

    def submit(self, fn) -> Future:
        fut: Future = Future()
        try:
            self._queue.put_nowait((fn, fut))
        except queue.Full:
            raise QueueFullError("generation queue is full") from None
        return fut

    def shutdown(self):
        for _ in self._threads:
            self._queue.put(None)
        for t in self._threads:
            t.join()


@dataclass
class ModelBundle:
    """A loaded checkpoint plus everything requests need to run against it."""

    checkpoint: Checkpoint
    model_id: str

    @property
    def params(self):
        return self.checkpoint.params

    @property
    def schedule(self):
        T, b1, bT = self.checkpoint.schedule_spec
        return make_schedule(T, b1, bT)

    @property
    def vocabularies(self) -> dict[str, list[str]]:
        return self.checkpoint.vocabularies

    @staticmethod
    def from_file(path: str | Path) -> "ModelBundle":
        digest = hashlib.sha256(Path(path).read_bytes()).hexdigest()[:12]
        return ModelBundle(checkpoint=load_checkpoint(path), model_id=digest)


class SampleRequest(BaseModel):
    character: str
    script: str
    style: str
    seed: int | None = None


class InpaintRequest(SampleRequest):
    image: str  # base64 PNG, grayscale, model resolution
    mask: str  # base64 PNG, 255 = inpaint, 0 = keep
    jump_len: int | None = None
    n_resample: int | None = None


def _bad_request(field: str, message: str) -> HTTPException:
    return HTTPException(status_code=400, detail={"field": field, "error": message})


def create_app(
    bundle: ModelBundle,
    workers: int = DEFAULT_WORKERS,
    max_pending: int = DEFAULT_MAX_PENDING,
) -> FastAPI:
    from contextlib import asynccontextmanager

    jobs = JobQueue(workers=workers, max_pending=max_pending)

    @asynccontextmanager
    async def lifespan(_app):
        yield
        jobs.shutdown()

    app = FastAPI(title="callipaint", version="0.1.0", lifespan=lifespan)
    app.state.bundle = bundle
    app.state.jobs = jobs
    vocab = bundle.vocabularies
    h, w = bundle.params.config.resolution

    def resolve_condition(req: SampleRequest):
        from .corpus import ConditionLabel

        ids = []
        for field_name in ("character", "script", "style"):
            name = getattr(req, field_name)
            names = vocab[field_name]
            if name not in names:
                raise _bad_request(field_name, f"unknown {field_name} name {name!r}")
            ids.append(names.index(name))
        return ConditionLabel(*ids)

    def decode_image(data_b64: str, field_name: str):
        try:
            raw = base64.b64decode(data_b64, validate=True)
        except (binascii.Error, ValueError):
            raise _bad_request(field_name, "invalid base64")
        try:
            if field_name == "mask":
                return Mask.from_png_bytes(raw)
            return GlyphImage.from_png_bytes(raw)
        except Exception:
            raise _bad_request(field_name, "not a decodable PNG")

    def check_resolution(obj, field_name: str):
        rh, rw = obj.resolution
        if rh > h or rw > w:
            raise HTTPException(
                status_code=413,
                detail={"field": field_name, "error": f"{rh}x{rw} exceeds model {h}x{w}"},
            )
        if (rh, rw) != (h, w):
            raise _bad_request(field_name, f"{rh}x{rw} does not match model {h}x{w}")

    def run_job(fn):
        try:
            fut = jobs.submit(fn)
        except QueueFullError:
            raise HTTPException(status_code=429, detail="generation queue is full")
        return fut.result()

    def seed_or_fresh(seed: int | None) -> int:
        if seed is not None:
            return seed
        return int.from_bytes(os.urandom(6), "little")

    @app.get("/api/v1/health")
    def health():
        return {"status": "ok", "model": bundle.model_id}

    @app.get("/api/v1/conditions")
    def conditions():
        return {
            "character": vocab["character"],
            "script": vocab["script"],
            "style": vocab["style"],
        }

    @app.post("/api/v1/sample")
    def handle_sample(req: SampleRequest):
        cond = resolve_condition(req)
        seed = seed_or_fresh(req.seed)
        schedule = bundle.schedule

        def job():
            t0 = time.monotonic()
            image, trace = diffusion_sample(bundle.params, cond, schedule, seed)
            return image, trace, (time.monotonic() - t0) * 1000.0

        try:
            image, trace, elapsed = run_job(job)
        except FloatingPointError as exc:
            return JSONResponse(
                status_code=500, content={"error": str(exc), "seed": seed}
            )
        return {
            "image": base64.b64encode(image.png_bytes()).decode("ascii"),
            "seed": seed,
            "steps": trace.denoise_count,
            "elapsed_ms": elapsed,
            "model": bundle.model_id,
        }

    @app.post("/api/v1/inpaint")
    def handle_inpaint(req: InpaintRequest):
        cond = resolve_condition(req)
        image = decode_image(req.image, "image")
        mask = decode_image(req.mask, "mask")
        check_resolution(image, "image")
        check_resolution(mask, "mask")
        seed = seed_or_fresh(req.seed)
        schedule = bundle.schedule
        config = repaint.InpaintConfig(
            jump_len=req.jump_len if req.jump_len is not None else repaint.DEFAULT_JUMP_LEN,
            n_resample=(
                req.n_resample if req.n_resample is not None else repaint.DEFAULT_N_RESAMPLE
            ),
            seed=seed,
        )
        try:
            config.validate(schedule.T)
        except ValueError as exc:
            raise _bad_request("jump_len", str(exc))

        image_model = image.to_model()

        def job():
            t0 = time.monotonic()
            out, trace = repaint.inpaint(
                bundle.params, image_model, mask, cond, schedule, config
            )
            return out, trace, (time.monotonic() - t0) * 1000.0

        try:
            out, trace, elapsed = run_job(job)
        except FloatingPointError as exc:
            return JSONResponse(
                status_code=500, content={"error": str(exc), "seed": seed}
            )

        out_unit8 = out.to_unit8().pixels
        keep = mask.bits == 0
        if not np.array_equal(out_unit8[keep], image.pixels[keep]):
            return JSONResponse(
                status_code=500,
                content={"error": "unmasked region mismatch (internal invariant)", "seed": seed},
            )
        return {
            "image": base64.b64encode(out.png_bytes()).decode("ascii"),
            "seed": seed,
            "steps": trace.denoise_count,
            "elapsed_ms": elapsed,
            "model": bundle.model_id,
        }

    return app


def serve(
    checkpoint_path: str | Path,
    bind: str = DEFAULT_BIND,
    workers: int = DEFAULT_WORKERS,
    max_pending: int = DEFAULT_MAX_PENDING,
):
    """Load the checkpoint and block serving HTTP until interrupted."""
    import uvicorn

    bundle = ModelBundle.from_file(checkpoint_path)
    app = create_app(bundle, workers=workers, max_pending=max_pending)
    host, _, port = bind.rpartition(":")
    uvicorn.run(app, host=host or "127.0.0.1", port=int(port))
