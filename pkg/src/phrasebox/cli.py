"""Command-line workflows: generate-data, train, eval, pseudo-label,
transfer, serve.

Each command reads an optional YAML config plus flag overrides, writes its
artifacts (checkpoints, corpora, CSVs, figures) under an output directory,
and exits nonzero with a machine-readable JSON error on failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

from .errors import ConfigError, PhraseboxError
from .evaluation import evaluate_detection, evaluate_grounding
from .inference import DecodeConfig
from .model import GroundingModel, ModelConfig, load_checkpoint, save_checkpoint
from .prompts import PromptConfig
from .records import read_corpus, read_manifest, write_corpus
from .reports import (
    save_confidence_histogram,
    save_eval_report,
    save_loss_curve,
    save_transfer_figure,
    write_transfer_results,
)
from .selftrain import CaptionedImage, generate_pseudo_labels
from .shapes import ShapesWorldSpec, generate_compositional_eval, generate_shapes_world
from .training import TrainConfig, train
from .transfer import (
    TransferTask,
    evaluate_prompt_embedding,
    full_tune,
    linear_probe,
    make_x_shot_task,
    manual_prompt_override,
    prompt_tune,
    zero_shot,
)


def load_yaml_config(path: str | None) -> dict[str, Any]:
    if not path:
        return {}
    data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"config root must be a mapping, got {type(data).__name__}")
    return data


# dataclass field annotations are strings (postponed evaluation)
_SCALARS = {"int": (int,), "float": (int, float), "str": (str,), "bool": (bool,)}


def build_dataclass(cls, data: dict[str, Any], prefix: str) -> Any:
    """Construct a config dataclass, collecting every violated field."""
    valid = {f.name: f for f in dataclasses.fields(cls)}
    errors = [f"{prefix}.{key}: unknown field" for key in data if key not in valid]
    kwargs = {}
    for key, value in data.items():
        if key not in valid:
            continue
        if isinstance(value, list):
            value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        expected = str(valid[key].type)
        if expected in _SCALARS:
            bool_mismatch = isinstance(value, bool) != (expected == "bool")
            if not isinstance(value, _SCALARS[expected]) or bool_mismatch:
                errors.append(
                    f"{prefix}.{key}: expected {expected}, got {type(value).__name__}"
                )
                continue
        kwargs[key] = value
    if errors:
        raise ConfigError(json.dumps(errors))
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(json.dumps([f"{prefix}: {exc}"])) from exc


def build_sections(cfg: dict[str, Any], sections: list[tuple[str, type]]) -> list[Any]:
    """Build several config dataclasses, accumulating violations across all of
    them so one error report lists every bad field."""
    results = []
    errors: list[str] = []
    for prefix, cls in sections:
        try:
            results.append(build_dataclass(cls, dict(cfg.get(prefix, {})), prefix))
        except ConfigError as exc:
            errors.extend(json.loads(str(exc)))
            results.append(None)
    if errors:
        raise ConfigError(json.dumps(errors))
    return results


def _fail(kind: str, message: str, fields: list[str] | None = None, code: int = 1) -> int:
    payload: dict[str, Any] = {"error": kind, "message": message}
    if fields:
        payload["fields"] = fields
    print(json.dumps(payload), file=sys.stderr)
    return code


def _corpus_classes(manifest: dict[str, Any]) -> list[str]:
    names = manifest.get("meta", {}).get("class_names")
    if not names:
        raise ConfigError(json.dumps(["manifest.meta.class_names missing"]))
    return list(names)


# -- commands ----------------------------------------------------------------


def cmd_generate_data(args) -> int:
    cfg = load_yaml_config(args.config)
    spec = build_dataclass(ShapesWorldSpec, cfg.get("spec", {}), "spec")
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    counts = {str(k): int(v) for k, v in cfg.get("counts", {}).items()} or {
        "train": 1400,
        "val": 100,
        "test": 200,
    }
    out = Path(args.out or cfg.get("out", "data/shapes"))
    splits = generate_shapes_world(spec, seed=seed, counts=counts)
    comp_cfg = cfg.get("compositional_eval")
    if comp_cfg:
        splits["compositional"] = generate_compositional_eval(
            spec, seed=int(comp_cfg.get("seed", seed + 7)), count=int(comp_cfg.get("count", 120))
        )
    meta = {
        "seed": seed,
        "spec": dataclasses.asdict(spec),
        "class_names": spec.class_names,
        "train_class_names": spec.train_class_names,
        "held_out_class_names": spec.held_out_class_names,
    }
    manifest = write_corpus(splits, out, meta=meta)
    print(json.dumps({"manifest": str(manifest), "counts": {k: len(v) for k, v in splits.items()}}))
    return 0


def cmd_train(args) -> int:
    cfg = load_yaml_config(args.config)
    out = Path(args.out or cfg.get("out", "runs/train"))
    out.mkdir(parents=True, exist_ok=True)
    data_dir = args.data or cfg.get("data")
    if not data_dir:
        raise ConfigError(json.dumps(["data: required (corpus directory)"]))
    corpus = read_corpus(data_dir)
    manifest = read_manifest(data_dir)
    overrides = dict(cfg)
    overrides["train"] = dict(cfg.get("train", {}))
    if args.steps is not None:
        overrides["train"]["steps"] = args.steps
    if args.seed is not None:
        overrides["train"]["seed"] = args.seed
    model_cfg, train_cfg, prompt_cfg = build_sections(
        overrides, [("model", ModelConfig), ("train", TrainConfig), ("prompt", PromptConfig)]
    )

    vocabulary = cfg.get("vocabulary") or manifest.get("meta", {}).get("train_class_names")
    if not vocabulary:
        vocabulary = sorted(
            {a.class_name for r in corpus["train"] for a in r.annotations if a.class_name}
        )
    model = GroundingModel(model_cfg, seed=train_cfg.seed)
    result = train(
        model,
        corpus["train"],
        vocabulary,
        train_cfg,
        prompt_cfg,
        loss_log_path=out / "loss_log.jsonl",
    )
    ckpt = save_checkpoint(
        model, out / "checkpoint.npz", seed=train_cfg.seed,
        extra={"vocabulary": list(vocabulary), "data": str(data_dir)},
    )
    if result.loss_curve:
        save_loss_curve(result.loss_curve, out / "loss_curve.png")
    print(
        json.dumps(
            {
                "checkpoint": str(ckpt),
                "steps": train_cfg.steps,
                "final_loss": result.loss_curve[-1]["total"] if result.loss_curve else None,
            }
        )
    )
    return 0


def _decode_from_args(args) -> DecodeConfig:
    return DecodeConfig(
        score_thresh=args.score_thresh, nms_iou=args.nms_iou, max_detections=args.max_detections
    )


def cmd_eval(args) -> int:
    cfg = load_yaml_config(args.config)
    out = Path(args.out or cfg.get("out", "runs/eval"))
    data_dir = args.data or cfg.get("data")
    if not data_dir:
        raise ConfigError(json.dumps(["data: required"]))
    model, _ = load_checkpoint(args.checkpoint or cfg.get("checkpoint"))
    corpus = read_corpus(data_dir)
    manifest = read_manifest(data_dir)
    if args.split not in corpus:
        raise ConfigError(json.dumps([f"split: {args.split!r} not in corpus"]))
    records = corpus[args.split]
    class_names = args.classes or _corpus_classes(manifest)
    prompt_cfg = build_dataclass(PromptConfig, cfg.get("prompt", {}), "prompt")
    if args.chunk_size:
        prompt_cfg = dataclasses.replace(prompt_cfg, chunk_size=args.chunk_size)
    needs_chunking = args.chunk_size is not None or len(class_names) > prompt_cfg.chunk_size
    result, detections = evaluate_detection(
        model, records, class_names, prompt_cfg, _decode_from_args(args), chunked=needs_chunking
    )
    recall = evaluate_grounding(model, records, prompt_cfg)
    result.recall_at = recall
    scores = [d.score for dets in detections.values() for d in dets]
    paths = save_eval_report(result, out, prefix=f"eval_{args.split}", score_samples=scores)
    print(
        json.dumps(
            {
                "ap": result.ap,
                "ap50": result.ap50,
                "recall_at": {str(k): v for k, v in recall.items()},
                "outputs": {k: str(v) for k, v in paths.items()},
            }
        )
    )
    return 0


def cmd_pseudo_label(args) -> int:
    cfg = load_yaml_config(args.config)
    out = Path(args.out or cfg.get("out", "runs/pseudo"))
    data_dir = args.data or cfg.get("data")
    if not data_dir:
        raise ConfigError(json.dumps(["data: required"]))
    corpus = read_corpus(data_dir)
    if args.split not in corpus:
        raise ConfigError(json.dumps([f"split: {args.split!r} not in corpus"]))
    pool = [
        CaptionedImage(
            image_id=r.image_id, caption=r.caption, image=r.image, image_path=r.image_path
        )
        for r in corpus[args.split]
    ]
    records = generate_pseudo_labels(args.teacher, pool, threshold=args.threshold)
    write_corpus({"pseudo": records}, out, meta={"teacher": str(args.teacher), "threshold": args.threshold})
    confidences = [c for r in records for a in r.annotations for c in (a.confidences or [])]
    if confidences:
        save_confidence_histogram(confidences, out / "confidence_hist.png", args.threshold)
    print(
        json.dumps(
            {
                "records": len(records),
                "boxes": len(confidences),
                "min_confidence": min(confidences) if confidences else None,
            }
        )
    )
    return 0


def _load_task(data_dir: str, classes: Sequence[str] | None) -> TransferTask:
    corpus = read_corpus(data_dir)
    manifest = read_manifest(data_dir)
    names = list(classes) if classes else _corpus_classes(manifest)
    return TransferTask(
        name=Path(data_dir).name,
        class_names=names,
        train=corpus.get("train", []),
        val=corpus.get("val", []),
        test=corpus.get("test", []),
    )


def cmd_transfer(args) -> int:
    cfg = load_yaml_config(args.config)
    out = Path(args.out or cfg.get("out", "runs/transfer"))
    out.mkdir(parents=True, exist_ok=True)
    model, _ = load_checkpoint(args.checkpoint or cfg.get("checkpoint"))
    task = _load_task(args.data or cfg.get("data"), args.classes)
    if args.rewrites:
        rewrites = yaml.safe_load(Path(args.rewrites).read_text(encoding="utf-8"))
        task = manual_prompt_override(task, dict(rewrites))
    seeds = list(range(args.seed, args.seed + args.seeds))
    rows: list[dict] = []
    for seed in seeds:
        shot_task = (
            make_x_shot_task(task, args.shots, seed) if args.shots else task
        )
        if args.regime == "zero-shot" or args.regime == "manual-prompt":
            outcome = zero_shot(model, shot_task)
            result = outcome.result
        elif args.regime == "prompt-tune":
            embedding, _curve = prompt_tune(
                model, shot_task, steps=args.steps, seed=seed
            )
            embedding.save(out / f"prompt_embedding_seed{seed}.npz")
            result = evaluate_prompt_embedding(model, shot_task, embedding)
        elif args.regime == "linear-probe":
            probe, _hash = linear_probe(model, shot_task, steps=args.steps, seed=seed)
            save_checkpoint(probe, out / f"linear_probe_seed{seed}.npz", seed=seed)
            result, _ = evaluate_detection(
                probe, shot_task.test, shot_task.eval_names(), name_map=shot_task.report_map()
            )
        elif args.regime == "full-tune":
            tuned = full_tune(model, shot_task, steps=args.steps, seed=seed)
            save_checkpoint(tuned, out / f"full_tune_seed{seed}.npz", seed=seed)
            result, _ = evaluate_detection(
                tuned, shot_task.test, shot_task.eval_names(), name_map=shot_task.report_map()
            )
        else:
            raise ConfigError(json.dumps([f"regime: unknown {args.regime!r}"]))
        rows.append(
            {
                "task": task.name,
                "regime": args.regime,
                "shots": args.shots or "all",
                "seed": seed,
                "ap": result.ap,
                "ap50": result.ap50,
                "per_class_ap": result.per_class_ap,
            }
        )
    csv_path = write_transfer_results(
        [{k: v for k, v in r.items() if k != "ap50"} for r in rows], out / "results.csv"
    )
    save_transfer_figure(rows, out / "results.png")
    aps = [r["ap"] for r in rows]
    print(
        json.dumps(
            {
                "regime": args.regime,
                "seeds": seeds,
                "ap_mean": float(np.mean(aps)),
                "ap_std": float(np.std(aps)),
                "csv": str(csv_path),
            }
        )
    )
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import ServiceConfig, create_app

    checkpoint = os.environ.get("PHRASEBOX_CHECKPOINT", args.checkpoint)
    host = os.environ.get("PHRASEBOX_HOST", args.host)
    port = int(os.environ.get("PHRASEBOX_PORT", args.port))
    if not checkpoint:
        raise ConfigError(json.dumps(["checkpoint: required (flag or PHRASEBOX_CHECKPOINT)"]))
    config = ServiceConfig(
        checkpoint_path=checkpoint,
        host=host,
        port=port,
        data_root=args.data_root,
        artifacts_dir=args.artifacts_dir,
    )
    app = create_app(config)
    uvicorn.run(app, host=config.host, port=config.port, log_level="warning")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="phrasebox", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="render a shapes-world corpus")
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", help="train a grounding detector")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a corpus split")
    p.add_argument("--config")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--split", default="test")
    p.add_argument("--chunk-size", type=int, default=None)
    p.add_argument("--classes", nargs="*")
    p.add_argument("--score-thresh", type=float, default=0.05)
    p.add_argument("--nms-iou", type=float, default=0.6)
    p.add_argument("--max-detections", type=int, default=100)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pseudo-label", help="teacher pseudo-grounding of captions")
    p.add_argument("--config")
    p.add_argument("--teacher", required=True)
    p.add_argument("--data")
    p.add_argument("--split", default="train")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_pseudo_label)

    p = sub.add_parser("transfer", help="task transfer regimes")
    p.add_argument("regime", choices=["zero-shot", "prompt-tune", "linear-probe", "full-tune", "manual-prompt"])
    p.add_argument("--config")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--classes", nargs="*")
    p.add_argument("--rewrites", help="YAML map of class name -> descriptive rewrite")
    p.add_argument("--shots", type=int)
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=150)
    p.add_argument("--out")
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("serve", help="run the HTTP inference service")
    p.add_argument("--checkpoint")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8787)
    p.add_argument("--data-root")
    p.add_argument("--artifacts-dir", default="service_artifacts")
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        try:
            fields = json.loads(str(exc))
        except json.JSONDecodeError:
            fields = [str(exc)]
        return _fail("config", "configuration invalid", fields, code=2)
    except PhraseboxError as exc:
        return _fail(type(exc).__name__, str(exc))
    except FileNotFoundError as exc:
        return _fail("missing-file", str(exc))


if __name__ == "__main__":
    raise SystemExit(main())
