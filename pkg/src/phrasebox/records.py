"""Grounding data records and their on-disk format.

A corpus is a directory of lossless PNG images plus line-delimited JSON
records and a manifest listing splits and provenance counts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable

import numpy as np
from PIL import Image

Box = tuple[float, float, float, float]


@dataclass
class Annotation:
    """One groundable phrase of a record's caption with its boxes."""

    char_span: tuple[int, int]
    class_name: str | None
    boxes: list[Box]
    confidences: list[float] | None = None  # pseudo boxes only

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "char_span": list(self.char_span),
            "class_name": self.class_name,
            "boxes": [list(b) for b in self.boxes],
        }
        if self.confidences is not None:
            out["confidences"] = list(self.confidences)
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Annotation":
        return cls(
            char_span=tuple(data["char_span"]),
            class_name=data.get("class_name"),
            boxes=[tuple(b) for b in data["boxes"]],
            confidences=data.get("confidences"),
        )


@dataclass
class GroundedRecord:
    """Unit of both gold and pseudo grounding data."""

    image_id: str
    caption: str
    annotations: list[Annotation]
    provenance: str = "gold"  # or "pseudo"
    image: np.ndarray | None = None  # (H, W, 3) float32 in [0, 1]
    image_path: str | None = None

    def validate(self) -> None:
        if self.provenance not in ("gold", "pseudo"):
            raise ValueError(f"bad provenance {self.provenance!r}")
        for ann in self.annotations:
            s, e = ann.char_span
            if not 0 <= s < e <= len(self.caption):
                raise ValueError(f"span {ann.char_span} outside caption")
            if self.provenance == "pseudo":
                if ann.confidences is None or len(ann.confidences) != len(ann.boxes):
                    raise ValueError("pseudo boxes must carry one confidence each")
            elif ann.confidences is not None:
                raise ValueError("gold boxes carry no confidence")

    @property
    def class_names(self) -> list[str]:
        """Distinct class names present, in annotation order."""
        seen: list[str] = []
        for ann in self.annotations:
            if ann.class_name and ann.class_name not in seen:
                seen.append(ann.class_name)
        return seen

    def to_dict(self) -> dict[str, Any]:
        return {
            "image_id": self.image_id,
            "image_path": self.image_path,
            "caption": self.caption,
            "provenance": self.provenance,
            "annotations": [a.to_dict() for a in self.annotations],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "GroundedRecord":
        return cls(
            image_id=data["image_id"],
            caption=data["caption"],
            annotations=[Annotation.from_dict(a) for a in data["annotations"]],
            provenance=data.get("provenance", "gold"),
            image_path=data.get("image_path"),
        )


def load_image(record: GroundedRecord, root: str | Path | None = None) -> np.ndarray:
    """Image as float32 [0, 1], loading from disk on demand."""
    if record.image is not None:
        return record.image
    if record.image_path is None:
        raise ValueError(f"record {record.image_id} has neither pixels nor a path")
    path = Path(record.image_path)
    if root is not None and not path.is_absolute():
        path = Path(root) / path
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    record.image = arr
    return arr


def save_image(image: np.ndarray, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.clip(np.asarray(image) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def write_records(records: Iterable[GroundedRecord], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record.to_dict()) + "\n")


def read_records(path: str | Path) -> list[GroundedRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(GroundedRecord.from_dict(json.loads(line)))
    return records


def write_corpus(
    splits: dict[str, list[GroundedRecord]],
    out_dir: str | Path,
    meta: dict[str, Any] | None = None,
) -> Path:
    """Materialize images and records under `out_dir`; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    manifest: dict[str, Any] = {"splits": {}, "meta": meta or {}}
    for split, records in splits.items():
        for record in records:
            if record.image is not None:
                rel = f"images/{record.image_id}.png"
                save_image(record.image, out_dir / rel)
                record.image_path = rel
        rel_records = f"{split}.jsonl"
        write_records(records, out_dir / rel_records)
        counts: dict[str, int] = {}
        for record in records:
            counts[record.provenance] = counts.get(record.provenance, 0) + 1
        manifest["splits"][split] = {
            "records": rel_records,
            "count": len(records),
            "provenance_counts": counts,
        }
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return manifest_path


def read_corpus(root: str | Path) -> dict[str, list[GroundedRecord]]:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    splits: dict[str, list[GroundedRecord]] = {}
    for split, info in manifest["splits"].items():
        records = read_records(root / info["records"])
        for record in records:
            if record.image_path is not None:
                record.image_path = str(root / record.image_path)
        splits[split] = records
    return splits


def read_manifest(root: str | Path) -> dict[str, Any]:
    return json.loads((Path(root) / "manifest.json").read_text(encoding="utf-8"))
