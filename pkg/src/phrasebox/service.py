"""HTTP inference service consumed by the playground UI.

POST /infer        image + (class list | free text) -> detections with phrase spans
GET  /model        checkpoint + config metadata
POST /prompt-tune  launch an async prompt-tuning job -> job id
GET  /jobs/{id}    job status / result

The loaded checkpoint is never mutated; prompt-tune jobs run one at a time on
a background worker and write prompt-embedding artifacts addressed by job id.
"""

from __future__ import annotations

import base64
import io
import json
import queue
import threading
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles
from PIL import Image
from pydantic import BaseModel, Field

from .chunker import extract_noun_phrases
from .errors import PhraseboxError
from .inference import DecodeConfig, infer, infer_chunked
from .model import load_checkpoint
from .prompts import PromptConfig, build_detection_prompt, build_grounding_prompt
from .records import read_corpus
from .transfer import PromptEmbedding, TransferTask, evaluate_prompt_embedding, make_x_shot_task, prompt_tune


@dataclass
class ServiceConfig:
    checkpoint_path: str
    host: str = "127.0.0.1"
    port: int = 8787
    data_root: str | None = None
    artifacts_dir: str = "service_artifacts"
    max_upload_bytes: int = 4 * 1024 * 1024
    max_concurrent: int = 8
    prompt_config: PromptConfig = field(default_factory=PromptConfig)


class InferOptions(BaseModel):
    score_thresh: float = Field(default=0.05, ge=0.0, le=1.0)
    nms_iou: float = Field(default=0.6, ge=0.0, le=1.0)
    max_detections: int = Field(default=100, ge=1)
    chunk_size: int | None = Field(default=None, ge=1)


class InferRequest(BaseModel):
    image: str  # base64 PNG/JPEG
    classes: list[str] | None = None
    text: str | None = None
    prompt_embedding_id: str | None = None
    options: InferOptions = Field(default_factory=InferOptions)


class PromptTuneRequest(BaseModel):
    dataset: str
    classes: list[str] | None = None
    shots: int | None = Field(default=None, ge=1)
    steps: int = Field(default=150, ge=0)
    lr: float = Field(default=0.05, gt=0)
    weight_decay: float = Field(default=0.25, ge=0)
    batch_size: int = Field(default=4, ge=1)
    seed: int = 0


@dataclass
class Job:
    id: str
    status: str = "queued"  # queued | running | done | error
    error: str | None = None
    result: dict[str, Any] | None = None


class JobStore:
    def __init__(self) -> None:
        self.jobs: dict[str, Job] = {}
        self.queue: "queue.Queue[tuple[Job, PromptTuneRequest]]" = queue.Queue()
        self.lock = threading.Lock()
        self.worker: threading.Thread | None = None

    def submit(self, request: PromptTuneRequest) -> Job:
        job = Job(id=uuid.uuid4().hex[:12])
        with self.lock:
            self.jobs[job.id] = job
        self.queue.put((job, request))
        return job

    def get(self, job_id: str) -> Job | None:
        with self.lock:
            return self.jobs.get(job_id)


def _decode_image(data_b64: str, limit: int, target_size: int) -> np.ndarray:
    raw = base64.b64decode(data_b64, validate=True)
    if len(raw) > limit:
        raise _Oversize(len(raw))
    with Image.open(io.BytesIO(raw)) as img:
        img = img.convert("RGB")
        if img.size != (target_size, target_size):
            img = img.resize((target_size, target_size), Image.BILINEAR)
        return np.asarray(img, dtype=np.float32) / 255.0


class _Oversize(Exception):
    def __init__(self, size: int):
        self.size = size


def create_app(config: ServiceConfig) -> FastAPI:
    model, meta = load_checkpoint(config.checkpoint_path)
    model.eval()
    store = JobStore()
    artifacts = Path(config.artifacts_dir)
    app = FastAPI(title="phrasebox", docs_url=None, redoc_url=None)
    app.state.model = model
    app.state.meta = meta
    app.state.config = config
    app.state.jobs = store
    infer_gate = threading.Semaphore(config.max_concurrent)

    @app.exception_handler(RequestValidationError)
    async def schema_error(request: Request, exc: RequestValidationError):
        detail = [
            {"loc": [str(x) for x in err.get("loc", [])], "msg": str(err.get("msg", ""))}
            for err in exc.errors()
        ]
        return JSONResponse(status_code=400, content={"error": "schema", "detail": detail})

    @app.exception_handler(Exception)
    async def internal_error(request: Request, exc: Exception):
        correlation = uuid.uuid4().hex[:12]
        return JSONResponse(
            status_code=500,
            content={"error": "internal", "correlation_id": correlation, "type": type(exc).__name__},
        )

    def _load_embedding(embedding_id: str) -> PromptEmbedding:
        path = artifacts / "jobs" / embedding_id / "prompt_embedding.npz"
        if not path.exists():
            raise FileNotFoundError(embedding_id)
        return PromptEmbedding.load(path)

    @app.get("/model")
    def model_info():
        return {
            "config": model.config.to_dict(),
            "checkpoint_path": str(config.checkpoint_path),
            "seed": meta.get("seed"),
            "parameter_count": int(sum(p.numel() for p in model.parameters())),
            "extra": meta.get("extra", {}),
        }

    @app.post("/infer")
    def run_infer(payload: InferRequest):
        has_classes = bool(payload.classes)
        has_text = bool(payload.text and payload.text.strip())
        has_embedding = payload.prompt_embedding_id is not None
        if sum([has_classes, has_text, has_embedding]) != 1:
            return JSONResponse(
                status_code=422,
                content={"error": "prompt", "detail": "provide exactly one of classes, text, prompt_embedding_id"},
            )
        try:
            image = _decode_image(
                payload.image, config.max_upload_bytes, model.config.image_size
            )
        except _Oversize as exc:
            return JSONResponse(
                status_code=413,
                content={"error": "oversize", "bytes": exc.size, "limit": config.max_upload_bytes},
            )
        except Exception:
            return JSONResponse(status_code=400, content={"error": "image", "detail": "undecodable image payload"})

        opts = payload.options
        decode = DecodeConfig(
            score_thresh=opts.score_thresh, nms_iou=opts.nms_iou, max_detections=opts.max_detections
        )
        prompt_cfg = config.prompt_config
        if opts.chunk_size:
            from dataclasses import replace as dc_replace

            prompt_cfg = dc_replace(prompt_cfg, chunk_size=opts.chunk_size)

        with infer_gate:
            if has_embedding:
                embedding = _load_embedding(payload.prompt_embedding_id)
                prompt = build_detection_prompt(embedding.class_names, prompt_cfg)
                detections = infer(model, image, prompt, decode, p0_override=embedding.tensor())
            elif has_classes:
                if len(set(payload.classes)) != len(payload.classes) or any(
                    not c.strip() for c in payload.classes
                ):
                    return JSONResponse(
                        status_code=422,
                        content={"error": "prompt", "detail": "class list has empty or duplicate names"},
                    )
                prompt = build_detection_prompt(payload.classes, prompt_cfg)
                detections = infer_chunked(model, image, payload.classes, prompt_cfg, decode)
            else:
                phrases = extract_noun_phrases(payload.text)
                if not phrases:
                    return JSONResponse(
                        status_code=422,
                        content={"error": "prompt", "detail": "no groundable phrases in text"},
                    )
                prompt = build_grounding_prompt(
                    payload.text, [p.char_span for p in phrases], prompt_cfg
                )
                detections = infer(model, image, prompt, decode)

        return {
            "image_size": model.config.image_size,
            "prompt": {
                "text": prompt.text,
                "phrases": [
                    {"text": ph.text, "char_span": list(ph.char_span)} for ph in prompt.phrases
                ],
            },
            "detections": [
                {
                    **d.to_dict(),
                    "char_span": list(prompt.phrases[d.phrase_index].char_span),
                }
                for d in detections
            ],
        }

    def _worker_loop():
        while True:
            job, request = store.queue.get()
            job.status = "running"
            try:
                job.result = _run_prompt_tune_job(job.id, request)
                job.status = "done"
            except Exception as exc:  # surfaced via the job record
                job.status = "error"
                job.error = f"{type(exc).__name__}: {exc}"

    def _run_prompt_tune_job(job_id: str, request: PromptTuneRequest) -> dict[str, Any]:
        if config.data_root is None:
            raise PhraseboxError("service has no data_root configured")
        corpus = read_corpus(Path(config.data_root) / request.dataset)
        train_records = corpus.get("train", [])
        classes = request.classes or sorted(
            {a.class_name for r in train_records for a in r.annotations if a.class_name}
        )
        task = TransferTask(
            name=request.dataset,
            class_names=classes,
            train=train_records,
            test=corpus.get("test", []),
        )
        if request.shots:
            task = make_x_shot_task(task, request.shots, request.seed)
        embedding, curve = prompt_tune(
            model,
            task,
            steps=request.steps,
            lr=request.lr,
            weight_decay=request.weight_decay,
            batch_size=request.batch_size,
            seed=request.seed,
            prompt_config=config.prompt_config,
        )
        out_dir = artifacts / "jobs" / job_id
        out_dir.mkdir(parents=True, exist_ok=True)
        embedding.save(out_dir / "prompt_embedding.npz")
        metrics: dict[str, Any] = {"steps": len(curve)}
        if task.test:
            result = evaluate_prompt_embedding(model, task, embedding, config.prompt_config)
            metrics["ap"] = result.ap
            metrics["ap50"] = result.ap50
        (out_dir / "metrics.json").write_text(json.dumps(metrics, indent=2) + "\n")
        return {"artifact": str(out_dir / "prompt_embedding.npz"), "metrics": metrics}

    @app.post("/prompt-tune")
    def launch_prompt_tune(payload: PromptTuneRequest):
        if store.worker is None:
            store.worker = threading.Thread(target=_worker_loop, daemon=True)
            store.worker.start()
        job = store.submit(payload)
        return {"job_id": job.id, "status": job.status}

    @app.get("/jobs/{job_id}")
    def job_status(job_id: str):
        job = store.get(job_id)
        if job is None:
            return JSONResponse(status_code=404, content={"error": "unknown job"})
        body: dict[str, Any] = {"job_id": job.id, "status": job.status}
        if job.error:
            body["error"] = job.error
        if job.result:
            body["result"] = job.result
        return body

    ui_dir = Path(__file__).resolve().parents[2] / "frontend" / "dist"
    if not ui_dir.exists():
        ui_dir = Path("frontend/dist")
    if ui_dir.exists():
        app.mount("/ui", StaticFiles(directory=str(ui_dir), html=True), name="ui")

    return app
