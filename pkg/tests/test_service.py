import base64
import io
import time

import numpy as np
import pytest
from fastapi.testclient import TestClient
from PIL import Image

from phrasebox.model import GroundingModel, ModelConfig, save_checkpoint
from phrasebox.records import write_corpus
from phrasebox.service import ServiceConfig, create_app
from phrasebox.shapes import ShapesWorldSpec, generate_shapes_world

SPEC = ShapesWorldSpec(size_range=(12, 20), noise_std=0.01)
SMALL = ModelConfig(d=32, heads=2, text_layers=1, fusion_layers=1)


def encode_image(arr: np.ndarray) -> str:
    img = Image.fromarray((arr * 255).astype(np.uint8), mode="RGB")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode()


@pytest.fixture(scope="module")
def client(tmp_path_factory):
    root = tmp_path_factory.mktemp("svc")
    model = GroundingModel(SMALL, seed=0)
    ckpt = save_checkpoint(model, root / "model.npz", seed=0)
    splits = generate_shapes_world(SPEC, seed=11, counts={"train": 6, "val": 0, "test": 3})
    write_corpus(splits, root / "data" / "toy", meta={"class_names": SPEC.class_names})
    config = ServiceConfig(
        checkpoint_path=str(ckpt),
        data_root=str(root / "data"),
        artifacts_dir=str(root / "artifacts"),
        max_upload_bytes=200_000,
    )
    app = create_app(config)
    with TestClient(app, raise_server_exceptions=False) as tc:
        yield tc


@pytest.fixture(scope="module")
def sample_image_b64():
    rng = np.random.default_rng(0)
    return encode_image(rng.uniform(0, 1, size=(64, 64, 3)))


class TestModelEndpoint:
    def test_metadata(self, client):
        body = client.get("/model").json()
        assert body["config"]["d"] == 32
        assert body["parameter_count"] > 0
        assert body["seed"] == 0


class TestInfer:
    def test_class_list_detections(self, client, sample_image_b64):
        resp = client.post(
            "/infer",
            json={"image": sample_image_b64, "classes": ["red circle", "blue square"]},
        )
        assert resp.status_code == 200
        body = resp.json()
        assert body["prompt"]["phrases"][0]["text"] == "red circle"
        for det in body["detections"]:
            assert det["class"] in ("red circle", "blue square")
            assert 0.0 <= det["score"] <= 1.0
            assert len(det["box"]) == 4
            assert det["char_span"] == body["prompt"]["phrases"][det["phrase_index"]]["char_span"]

    def test_free_text_routes_through_chunker(self, client, sample_image_b64):
        resp = client.post(
            "/infer",
            json={"image": sample_image_b64, "text": "a red circle and a blue square"},
        )
        assert resp.status_code == 200
        texts = [p["text"] for p in resp.json()["prompt"]["phrases"]]
        assert texts == ["a red circle", "a blue square"]

    def test_empty_prompt_422(self, client, sample_image_b64):
        resp = client.post("/infer", json={"image": sample_image_b64, "text": "   "})
        assert resp.status_code == 422
        resp = client.post("/infer", json={"image": sample_image_b64})
        assert resp.status_code == 422
        resp = client.post("/infer", json={"image": sample_image_b64, "text": "running quickly"})
        assert resp.status_code == 422

    def test_schema_error_400(self, client):
        resp = client.post("/infer", json={"classes": ["x"]})  # image missing
        assert resp.status_code == 400
        assert resp.json()["error"] == "schema"

    def test_undecodable_image_400(self, client):
        resp = client.post(
            "/infer", json={"image": base64.b64encode(b"junk").decode(), "classes": ["x"]}
        )
        assert resp.status_code == 400

    def test_oversize_413(self, client):
        rng = np.random.default_rng(1)
        big = encode_image(rng.uniform(0, 1, size=(640, 640, 3)))
        resp = client.post("/infer", json={"image": big, "classes": ["x"]})
        assert resp.status_code == 413

    def test_deterministic_response_bytes(self, client, sample_image_b64):
        payload = {"image": sample_image_b64, "classes": ["red circle"]}
        a = client.post("/infer", json=payload)
        b = client.post("/infer", json=payload)
        assert a.content == b.content


class TestPromptTuneJobs:
    def test_job_lifecycle(self, client, sample_image_b64):
        resp = client.post(
            "/prompt-tune",
            json={"dataset": "toy", "steps": 2, "batch_size": 1, "seed": 0},
        )
        assert resp.status_code == 200
        job_id = resp.json()["job_id"]
        for _ in range(200):
            status = client.get(f"/jobs/{job_id}").json()
            if status["status"] in ("done", "error"):
                break
            time.sleep(0.1)
        assert status["status"] == "done", status
        assert "prompt_embedding.npz" in status["result"]["artifact"]

        # tuned embedding usable as an inference mode
        resp = client.post(
            "/infer", json={"image": sample_image_b64, "prompt_embedding_id": job_id}
        )
        assert resp.status_code == 200

    def test_unknown_job_404(self, client):
        assert client.get("/jobs/doesnotexist").status_code == 404


class TestCheckpointImmutability:
    def test_prompt_tune_job_never_mutates_the_loaded_model(self, client, sample_image_b64):
        from phrasebox.model import parameter_hash

        model = client.app.state.model
        before = parameter_hash(model)
        resp = client.post(
            "/prompt-tune", json={"dataset": "toy", "steps": 3, "batch_size": 1, "seed": 1}
        )
        job_id = resp.json()["job_id"]
        for _ in range(200):
            status = client.get(f"/jobs/{job_id}").json()
            if status["status"] in ("done", "error"):
                break
            time.sleep(0.1)
        assert status["status"] == "done", status
        assert parameter_hash(model) == before
