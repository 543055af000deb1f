"""Unified one-hot label space over partially annotated datasets.

Every (dataset, raw label value) pair gets its own global class index,
even when two datasets label the same anatomy: annotation protocols
differ, so the classes are kept apart. Global index 0 is background and
has no output channel; class ``g`` lives in channel ``g - 1``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import EncodingError, ManifestError

BACKGROUND = "Background"

# Ten source collections and their raw label values, in registry order.
DEFAULT_DATASETS = [
    ("msd_liver", "CT", {1: "Liver", 2: "Liver tumor"}),
    ("msd_pancreas", "CT", {1: "Pancreas", 2: "Pancreas tumor"}),
    ("msd_hepatic_vessel", "CT", {1: "Hepatic vessels", 2: "Hepatic vessels tumor"}),
    ("msd_lung", "CT", {1: "Lung tumor"}),
    ("msd_spleen", "CT", {1: "Spleen"}),
    ("msd_colon", "CT", {1: "Colon cancer"}),
    ("pelvis", "CT", {1: "Bladder", 2: "Uterus", 3: "Rectum", 4: "small bowel"}),
    ("pancreas_ct", "CT", {1: "Pancreas"}),
    ("kits19", "CT", {1: "Kidney", 2: "Kidney tumor"}),
    ("retouch", "OCT", {1: "Intraretinal Fluid (IRF)", 2: "Subretinal Fluid (SRF)",
                        3: "Pigment Epithelium Detachments (PED)"}),
]


@dataclass
class Sample:
    image: str
    labels: list = field(default_factory=list)
    truth: dict = field(default_factory=dict)


@dataclass
class DatasetManifest:
    dataset_id: str
    labels: dict  # raw value -> class name, background (0) excluded
    modality: str = "unknown"
    spacing: tuple = (1.0, 1.0, 1.0)
    label_groups: list | None = None
    samples: list = field(default_factory=list)
    root: Path | None = None

    def path(self, rel: str) -> Path:
        return (self.root or Path(".")) / rel

    def to_dict(self) -> dict:
        d = {
            "dataset_id": self.dataset_id,
            "modality": self.modality,
            "labels": {str(k): v for k, v in self.labels.items()},
            "spacing": list(self.spacing),
            "samples": [{"image": s.image, "labels": list(s.labels), "truth": dict(s.truth)}
                        for s in self.samples],
        }
        if self.label_groups is not None:
            d["label_groups"] = [list(g) for g in self.label_groups]
        return d


def _reject_duplicates(pairs):
    seen = {}
    for k, v in pairs:
        if k in seen:
            raise ManifestError(f"duplicate key {k!r} in manifest")
        seen[k] = v
    return seen


def _parse_labels(raw, dataset_id) -> dict:
    items = raw.items() if isinstance(raw, dict) else raw
    out = {}
    for key, name in items:
        try:
            value = int(key)
        except (TypeError, ValueError) as exc:
            raise ManifestError(f"{dataset_id}: label value {key!r} is not an integer") from exc
        if value == 0:
            continue  # background is implicit
        if value < 0:
            raise ManifestError(f"{dataset_id}: negative label value {value}")
        if value in out:
            raise ManifestError(f"{dataset_id}: duplicate raw label value {value}")
        out[value] = str(name)
    return dict(sorted(out.items()))


def manifest_from_dict(d: dict, root: Path | None = None) -> DatasetManifest:
    try:
        dataset_id = str(d["dataset_id"])
        labels = _parse_labels(d["labels"], dataset_id)
    except KeyError as exc:
        raise ManifestError(f"manifest missing field {exc}") from exc
    spacing = tuple(float(s) for s in d.get("spacing", (1.0, 1.0, 1.0)))
    if len(spacing) != 3 or min(spacing) <= 0:
        raise ManifestError(f"{dataset_id}: spacing must be three positive numbers")
    samples = [Sample(s["image"], list(s.get("labels", [])), dict(s.get("truth", {})))
               for s in d.get("samples", [])]
    groups = d.get("label_groups")
    if groups is not None:
        groups = [[int(v) for v in g] for g in groups]
        flat = [v for g in groups for v in g]
        if sorted(flat) != sorted(labels) or len(set(flat)) != len(flat):
            raise ManifestError(f"{dataset_id}: label_groups must partition the label values")
    return DatasetManifest(dataset_id, labels, str(d.get("modality", "unknown")), spacing,
                           groups, samples, root)


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        d = json.loads(path.read_text(encoding="utf-8"), object_pairs_hook=_reject_duplicates)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON ({exc})") from exc
    return manifest_from_dict(d, root=path.parent)


def discover_manifests(data_dir) -> list[DatasetManifest]:
    """All ``dataset_*/manifest.json`` under ``data_dir``, sorted by directory name."""
    paths = sorted(Path(data_dir).glob("dataset_*/manifest.json"))
    if not paths:
        raise ManifestError(f"no dataset_*/manifest.json under {data_dir}")
    return [load_manifest(p) for p in paths]


@dataclass(frozen=True)
class LabelSpace:
    classes: tuple  # ((global_index, name), ...) with background first
    raw_to_global: dict  # dataset_id -> {raw value: global index}

    @property
    def num_classes(self) -> int:
        return len(self.classes) - 1

    @property
    def dataset_ids(self) -> list:
        return list(self.raw_to_global)

    def name(self, g: int) -> str:
        return self.classes[g][1]

    def annotated(self, dataset_id: str) -> frozenset:
        return frozenset(self._entry(dataset_id).values())

    def mask(self, dataset_id: str) -> np.ndarray:
        m = np.zeros(self.num_classes, dtype=bool)
        for g in self.annotated(dataset_id):
            m[g - 1] = True
        return m

    def owner(self, g: int) -> tuple:
        """(dataset_id, raw value) that defines global class ``g``."""
        for ds, table in self.raw_to_global.items():
            for raw, gg in table.items():
                if gg == g:
                    return ds, raw
        raise KeyError(g)

    def _entry(self, dataset_id):
        try:
            return self.raw_to_global[dataset_id]
        except KeyError:
            raise EncodingError(f"dataset {dataset_id!r} is not in the label space") from None

    def to_dict(self) -> dict:
        return {"classes": [[g, n] for g, n in self.classes],
                "datasets": {ds: {str(r): g for r, g in t.items()}
                             for ds, t in self.raw_to_global.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "LabelSpace":
        return cls(tuple((int(g), str(n)) for g, n in d["classes"]),
                   {ds: {int(r): int(g) for r, g in t.items()} for ds, t in d["datasets"].items()})


def build_label_space(manifests: Sequence) -> LabelSpace:
    """Assign global indices 1, 2, ... in manifest order, raw values ascending within each."""
    classes = [(0, BACKGROUND)]
    table = {}
    for m in manifests:
        if isinstance(m, dict):
            m = manifest_from_dict(m)
        elif isinstance(m, tuple):
            m = DatasetManifest(m[0], _parse_labels(m[2], m[0]), m[1])
        if m.dataset_id in table:
            raise ManifestError(f"dataset {m.dataset_id!r} listed twice")
        entry = {}
        for raw, name in sorted(m.labels.items()):
            g = len(classes)
            classes.append((g, name))
            entry[raw] = g
        table[m.dataset_id] = entry
    return LabelSpace(tuple(classes), table)


def default_label_space() -> LabelSpace:
    return build_label_space(DEFAULT_DATASETS)


@dataclass
class SampleTarget:
    onehot: np.ndarray  # (num_classes, H, W) in {0, 1}
    mask: np.ndarray    # (num_classes,) bool


def _as_maps(raw) -> list:
    if isinstance(raw, np.ndarray):
        return [raw] if raw.ndim == 2 else list(raw)
    return [np.asarray(r) for r in raw]


def encode_target(raw, dataset_id: str, space: LabelSpace) -> SampleTarget:
    """One-hot target from one raw label map, or several maps for nested structures."""
    entry = space._entry(dataset_id)
    maps = _as_maps(raw)
    shape = maps[0].shape
    if any(m.shape != shape for m in maps) or len(shape) != 2:
        raise EncodingError(f"{dataset_id}: label maps must share one 2-d shape")
    onehot = np.zeros((space.num_classes,) + shape)
    for m in maps:
        values = np.unique(m)
        for v in values:
            v = int(v)
            if v == 0:
                continue
            if v not in entry:
                raise EncodingError(f"unknown raw label value {v} for dataset {dataset_id!r}")
            onehot[entry[v] - 1][m == v] = 1.0
    return SampleTarget(onehot, space.mask(dataset_id))


def decode_target(target: SampleTarget, dataset_id: str, space: LabelSpace) -> np.ndarray:
    """Single raw map back from a target: first annotated channel that is on, else 0."""
    entry = space._entry(dataset_id)
    out = np.zeros(target.onehot.shape[1:], dtype=np.int64)
    assigned = np.zeros(out.shape, dtype=bool)
    for raw, g in sorted(entry.items(), key=lambda kv: kv[1]):
        on = (target.onehot[g - 1] > 0.5) & ~assigned
        out[on] = raw
        assigned |= on
    return out
