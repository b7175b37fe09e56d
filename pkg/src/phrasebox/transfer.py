"""Task transfer regimes: manual prompt rewrites, prompt tuning of the
pre-fusion embedding, linear probing, full fine-tuning, and X-shot splits."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .errors import DivergenceDetected, InsufficientData, UnknownClass
from .evaluation import evaluate_detection
from .inference import DecodeConfig
from .losses import record_loss
from .metrics import EvalResult
from .model import GroundingModel, parameter_hash
from .prompts import PromptConfig, build_detection_prompt
from .records import GroundedRecord
from .targets import match_anchors
from .training import TrainConfig, train
from .records import load_image


@dataclass
class TransferTask:
    name: str
    class_names: list[str]
    train: list[GroundedRecord] = field(default_factory=list)
    val: list[GroundedRecord] = field(default_factory=list)
    test: list[GroundedRecord] = field(default_factory=list)
    shots: int | str = "all"
    rewrites: dict[str, str] = field(default_factory=dict)

    def eval_names(self) -> list[str]:
        """Prompt phrases actually evaluated (rewrites applied)."""
        return [self.rewrites.get(name, name) for name in self.class_names]

    def report_map(self) -> dict[str, str]:
        """Maps evaluated phrase text back to the original class name."""
        return {self.rewrites.get(n, n): n for n in self.class_names}


@dataclass
class PromptEmbedding:
    """A task-specific tuned pre-fusion prompt embedding; the grounding model
    itself stays frozen."""

    class_names: list[str]
    prompt_text: str
    embedding: np.ndarray  # (M, d) float32
    base_parameter_hash: str

    def tensor(self) -> torch.Tensor:
        return torch.from_numpy(self.embedding)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        meta = {
            "class_names": self.class_names,
            "prompt_text": self.prompt_text,
            "base_parameter_hash": self.base_parameter_hash,
        }
        with open(path, "wb") as fh:
            np.savez(fh, __meta__=np.array(json.dumps(meta)), embedding=self.embedding)
        return path

    @classmethod
    def load(cls, path: str | Path) -> "PromptEmbedding":
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["__meta__"]))
            return cls(
                class_names=meta["class_names"],
                prompt_text=meta["prompt_text"],
                embedding=np.array(data["embedding"]),
                base_parameter_hash=meta["base_parameter_hash"],
            )


def manual_prompt_override(task: TransferTask, rewrites: dict[str, str]) -> TransferTask:
    """Evaluate with rewritten phrases, report under original names; zero
    parameters change."""
    for name, rewrite in rewrites.items():
        if name not in task.class_names:
            raise UnknownClass(f"{name!r} is not a task class")
        if not rewrite:
            raise ValueError(f"empty rewrite for {name!r}")
    merged = {**task.rewrites, **rewrites}
    return replace(task, rewrites=merged)


def sample_x_shot(
    records: Sequence[GroundedRecord],
    class_names: Sequence[str],
    shots: int,
    seed: int,
) -> list[GroundedRecord]:
    """Greedy random image selection until every class has >= `shots`
    instances. Deterministic per seed."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(records))
    counts = {name: 0 for name in class_names}
    chosen: list[GroundedRecord] = []
    for i in order:
        if all(v >= shots for v in counts.values()):
            break
        record = records[int(i)]
        gain = False
        for ann in record.annotations:
            if ann.class_name in counts:
                if counts[ann.class_name] < shots:
                    gain = True
        if not gain:
            continue
        chosen.append(record)
        for ann in record.annotations:
            if ann.class_name in counts:
                counts[ann.class_name] += len(ann.boxes)
    if any(v < shots for v in counts.values()):
        lacking = {k: v for k, v in counts.items() if v < shots}
        raise InsufficientData(f"cannot reach {shots} instances for {lacking}")
    return chosen


def make_x_shot_task(
    base: TransferTask, shots: int, seed: int
) -> TransferTask:
    subset = sample_x_shot(base.train, base.class_names, shots, seed)
    return replace(base, train=subset, shots=shots)


@dataclass
class TransferOutcome:
    regime: str
    result: EvalResult
    embedding: PromptEmbedding | None = None
    model: GroundingModel | None = None
    frozen_hash_before: str | None = None
    frozen_hash_after: str | None = None


def zero_shot(
    model: GroundingModel,
    task: TransferTask,
    prompt_config: PromptConfig | None = None,
    decode: DecodeConfig = DecodeConfig(),
    split: str = "test",
) -> TransferOutcome:
    """Evaluation without touching any task training data."""
    records = getattr(task, split)
    result, _ = evaluate_detection(
        model, records, task.eval_names(), prompt_config, decode, name_map=task.report_map()
    )
    return TransferOutcome(regime="zero-shot", result=result)


def prompt_tune(
    model: GroundingModel,
    task: TransferTask,
    steps: int = 150,
    lr: float = 0.05,
    weight_decay: float = 0.25,
    batch_size: int = 4,
    seed: int = 0,
    prompt_config: PromptConfig | None = None,
    momentum: float = 0.9,
) -> tuple[PromptEmbedding, list[dict]]:
    """Optimize the pre-fusion prompt embedding against the grounding loss with
    every model parameter frozen; the language encoder is unused afterwards."""
    prompt_config = prompt_config or PromptConfig()
    names = task.eval_names()
    prompt = build_detection_prompt(names, prompt_config)
    hash_before = parameter_hash(model)
    model.eval()
    with torch.no_grad():
        canonical = not model.config.fusion_enabled
        p0_init = model.encode_text(prompt, canonical=canonical)
    p0 = torch.nn.Parameter(p0_init.clone())
    for param in model.parameters():
        param.requires_grad_(False)
    optimizer = torch.optim.SGD([p0], lr=lr, momentum=momentum, weight_decay=weight_decay)
    rng = np.random.default_rng(seed)
    index = {name: i for i, name in enumerate(names)}
    name_of = {task.class_names[i]: names[i] for i in range(len(names))}
    curve: list[dict] = []
    for step in range(steps):
        batch = rng.integers(0, len(task.train), size=batch_size)
        total = None
        for i in batch:
            record = task.train[int(i)]
            image = torch.from_numpy(
                np.ascontiguousarray(load_image(record), dtype=np.float32)
            )
            output = model(image, prompt, p0_override=p0, canonical_text=not model.config.fusion_enabled)
            boxes, ids = [], []
            for ann in record.annotations:
                mapped = name_of.get(ann.class_name or "")
                if mapped in index:
                    for box in ann.boxes:
                        boxes.append(box)
                        ids.append(index[mapped])
            gt = np.array(boxes, dtype=np.float64).reshape(-1, 4)
            targets = match_anchors(
                output.anchors, gt, np.array(ids, dtype=np.int64), prompt.num_phrases
            )
            loss, _ = record_loss(
                output.logits[0], output.deltas[0], output.anchors, targets, gt,
                prompt, model.config.loss_mode,
            )
            total = loss if total is None else total + loss
        total = total / batch_size
        if not torch.isfinite(total):
            raise DivergenceDetected(f"prompt tuning diverged at step {step}")
        optimizer.zero_grad()
        total.backward()
        optimizer.step()
        curve.append({"step": step, "total": float(total.detach())})
    for param in model.parameters():
        param.requires_grad_(True)
    hash_after = parameter_hash(model)
    assert hash_before == hash_after, "prompt tuning must not touch model parameters"
    return (
        PromptEmbedding(
            class_names=list(task.class_names),
            prompt_text=prompt.text,
            embedding=p0.detach().cpu().numpy(),
            base_parameter_hash=hash_before,
        ),
        curve,
    )


def evaluate_prompt_embedding(
    model: GroundingModel,
    task: TransferTask,
    embedding: PromptEmbedding,
    prompt_config: PromptConfig | None = None,
    decode: DecodeConfig = DecodeConfig(),
    split: str = "test",
) -> EvalResult:
    records = getattr(task, split)
    result, _ = evaluate_detection(
        model,
        records,
        task.eval_names(),
        prompt_config,
        decode,
        p0_override=embedding.tensor(),
        name_map=task.report_map(),
    )
    return result


def _records_with_eval_names(task: TransferTask) -> list[GroundedRecord]:
    """Copies of the task's training records with class names rewritten to the
    evaluated phrases, so training prompts match evaluation prompts."""
    if not task.rewrites:
        return list(task.train)
    out: list[GroundedRecord] = []
    for record in task.train:
        clone = copy.copy(record)
        clone.annotations = [copy.copy(a) for a in record.annotations]
        for ann in clone.annotations:
            if ann.class_name in task.rewrites:
                ann.class_name = task.rewrites[ann.class_name]
        out.append(clone)
    return out


def _clone_model(model: GroundingModel, region_proj: bool = False) -> GroundingModel:
    config = replace(model.config, region_proj=model.config.region_proj or region_proj)
    clone = GroundingModel(config, seed=model.init_seed)
    state = model.state_dict()
    own = clone.state_dict()
    for key in own:
        if key in state:
            own[key] = state[key].clone()
    clone.load_state_dict(own)
    return clone


def linear_probe(
    model: GroundingModel,
    task: TransferTask,
    steps: int = 150,
    lr: float = 1e-4,
    weight_decay: float = 0.05,
    batch_size: int = 4,
    seed: int = 0,
    prompt_config: PromptConfig | None = None,
) -> tuple[GroundingModel, str]:
    """Tune only the box head and a fresh region-side projection (initialized
    to identity) in front of the alignment dot product."""
    prompt_config = prompt_config or PromptConfig()
    probe = _clone_model(model, region_proj=True)
    tunable = {"region_proj.weight", "region_proj.bias", "box_head.weight", "box_head.bias"}
    frozen_hash_before = _hash_excluding(probe, tunable)
    for name, param in probe.named_parameters():
        param.requires_grad_(name in tunable)
    config = TrainConfig(
        steps=steps,
        batch_size=batch_size,
        lr=lr,
        weight_decay=weight_decay,
        optimizer="sgd",
        seed=seed,
        gold_caption_fraction=0.0,
        mix_captions=False,
        decay_milestones=(1.1, 1.2),  # no decay inside a short probe
    )
    # probe trains through the fixed task prompt (no downsampling of a
    # transfer task's small vocabulary)
    prompt_cfg = replace(prompt_config, downsample_cap=max(len(task.class_names), 1))
    train(probe, _records_with_eval_names(task), task.eval_names(), config, prompt_cfg)
    for param in probe.parameters():
        param.requires_grad_(True)
    assert _hash_excluding(probe, tunable) == frozen_hash_before
    return probe, frozen_hash_before


def full_tune(
    model: GroundingModel,
    task: TransferTask,
    steps: int = 300,
    lr: float = 1e-4,
    batch_size: int = 4,
    seed: int = 0,
    prompt_config: PromptConfig | None = None,
) -> GroundingModel:
    """Fine-tune everything with the pre-training recipe (language backbone at
    a tenth of the base rate)."""
    prompt_config = prompt_config or PromptConfig()
    tuned = _clone_model(model)
    config = TrainConfig(
        steps=steps,
        batch_size=batch_size,
        lr=lr,
        optimizer="adam",
        seed=seed,
        gold_caption_fraction=0.0,
        mix_captions=False,
    )
    prompt_cfg = replace(prompt_config, downsample_cap=max(len(task.class_names), 1))
    if steps > 0:
        train(tuned, _records_with_eval_names(task), task.eval_names(), config, prompt_cfg)
    return tuned


def _hash_excluding(model: GroundingModel, excluded: set[str]) -> str:
    digest = hashlib.blake2b(digest_size=16)
    for name, param in sorted(model.named_parameters()):
        if name not in excluded:
            digest.update(name.encode())
            digest.update(param.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()
