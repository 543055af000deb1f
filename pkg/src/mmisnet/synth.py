"""Synthetic multi-dataset corpus: elliptical organs with nested blob lesions.

Each generated dataset draws both structures where present but annotates
only the structures it declares, so a lesion can be visible yet unlabeled
(the partial-annotation condition). A full-truth sidecar with every
structure's mask is written next to the partial labels.

Output layout::

    <out>/dataset_<id>/images/<n>.mmiv          float64 image volume
    <out>/dataset_<id>/labels/<n>_g<k>.mmiv     uint16 raw label map, one per label group
    <out>/dataset_<id>/truth/<n>_<struct>.mmiv  uint16 binary mask, every structure
    <out>/dataset_<id>/manifest.json
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .volume import Volume, write_volume

STRUCTURES = ("organ", "lesion")
PARENT = {"lesion": "organ"}

# per-modality (background, organ, lesion) base intensities
INTENSITY = {
    "additive": (0.2, 0.6, 1.0),
    "speckle": (0.7, 1.4, 0.9),
}
ADDITIVE_NOISE_STD = 0.05
SPECKLE_LOOKS = 16  # gamma shape; speckle std = 1/sqrt(looks)
SPACING = {"additive": (1.0, 0.8, 0.8), "speckle": (0.05, 0.01, 0.01)}
# documented gap between the two modalities' mean image intensity
MODALITY_MEAN_GAP = 0.3


@dataclass
class DatasetSpec:
    dataset_id: str
    count: int = 8
    modality: str = "additive"
    annotate: tuple = ("organ",)
    lesion_rate: float = 0.5
    slices: int = 1

    def __post_init__(self):
        self.annotate = tuple(self.annotate)
        if self.count < 1 or self.slices < 1:
            raise ConfigError(f"dataset {self.dataset_id}: count and slices must be >= 1")
        if self.modality not in INTENSITY:
            raise ConfigError(f"dataset {self.dataset_id}: unknown modality {self.modality!r}")
        if not self.annotate:
            raise ConfigError(f"dataset {self.dataset_id}: must annotate at least one structure")
        for s in self.annotate:
            if s not in STRUCTURES:
                raise ConfigError(f"dataset {self.dataset_id}: unknown structure {s!r}")
        if len(set(self.annotate)) != len(self.annotate):
            raise ConfigError(f"dataset {self.dataset_id}: duplicate annotated structure")
        if not 0.0 <= self.lesion_rate <= 1.0:
            raise ConfigError(f"dataset {self.dataset_id}: lesion_rate must lie in [0, 1]")


@dataclass
class SynthSpec:
    seed: int = 0
    image_size: int = 64
    datasets: list = field(default_factory=list)

    def __post_init__(self):
        self.datasets = [d if isinstance(d, DatasetSpec) else DatasetSpec(**_ds_kwargs(d))
                         for d in self.datasets]
        if self.image_size < 16:
            raise ConfigError("image_size must be at least 16")
        ids = [d.dataset_id for d in self.datasets]
        if len(set(ids)) != len(ids):
            raise ConfigError("dataset ids must be unique")
        if not ids:
            raise ConfigError("at least one dataset is required")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        return cls(seed=int(d.get("seed", 0)), image_size=int(d.get("image_size", 64)),
                   datasets=list(d.get("datasets", [])))

    @classmethod
    def load(cls, path) -> "SynthSpec":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_dict(self) -> dict:
        return {"seed": self.seed, "image_size": self.image_size,
                "datasets": [{"id": d.dataset_id, "count": d.count, "modality": d.modality,
                              "annotate": list(d.annotate), "lesion_rate": d.lesion_rate,
                              "slices": d.slices} for d in self.datasets]}


def _ds_kwargs(d: dict) -> dict:
    d = dict(d)
    if "id" in d:
        d["dataset_id"] = str(d.pop("id"))
    return d


# --------------------------------------------------------------------------
# geometry

def _grid(size):
    yy, xx = np.mgrid[0:size, 0:size]
    return yy.astype(np.float64), xx.astype(np.float64)


def rasterize(shape: dict, size: int) -> np.ndarray:
    """Boolean mask of pixel centres inside ``shape``."""
    yy, xx = _grid(size)
    dy, dx = yy - shape["cy"], xx - shape["cx"]
    if shape["kind"] == "ellipse":
        c, s = math.cos(shape["angle"]), math.sin(shape["angle"])
        u = dx * c + dy * s
        v = -dx * s + dy * c
        return (u / shape["a"]) ** 2 + (v / shape["b"]) ** 2 <= 1.0
    if shape["kind"] == "blob":
        rho = np.hypot(dx, dy)
        phi = np.arctan2(dy, dx)
        radius = shape["r"] * (1.0 + shape["amp"] * np.sin(shape["lobes"] * phi + shape["phase"]))
        return rho <= radius
    raise ValueError(f"unknown shape kind {shape['kind']!r}")


def _strictly_inside(inner: np.ndarray, outer: np.ndarray) -> bool:
    # every inner pixel and its 4-neighbours lie in the outer mask
    if not inner.any():
        return False
    padded = np.pad(outer, 1)
    core = padded[1:-1, 1:-1]
    ring = (padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:] & core)
    return bool(np.all(ring[inner]))


def _draw_organ(rng, size):
    return {
        "kind": "ellipse",
        "cy": float(rng.uniform(0.4, 0.6) * size),
        "cx": float(rng.uniform(0.4, 0.6) * size),
        "a": float(rng.uniform(0.22, 0.32) * size),
        "b": float(rng.uniform(0.18, 0.26) * size),
        "angle": float(rng.uniform(0.0, math.pi)),
    }


def _draw_lesion(rng, size, organ_mask, organ):
    for _ in range(1000):
        r = float(rng.uniform(0.08, 0.12) * size)
        ang = rng.uniform(0.0, 2 * math.pi)
        dist = rng.uniform(0.0, 0.4) * min(organ["a"], organ["b"])
        shape = {
            "kind": "blob",
            "cy": float(organ["cy"] + dist * math.sin(ang)),
            "cx": float(organ["cx"] + dist * math.cos(ang)),
            "r": r,
            "amp": float(rng.uniform(0.05, 0.2)),
            "lobes": int(rng.integers(2, 5)),
            "phase": float(rng.uniform(0.0, 2 * math.pi)),
        }
        if _strictly_inside(rasterize(shape, size), organ_mask):
            return shape
    raise RuntimeError("could not place a lesion inside the organ")


def _render(rng, masks, modality, size):
    bg, organ_i, lesion_i = INTENSITY[modality]
    img = np.full((size, size), bg)
    img[masks["organ"]] = organ_i
    img[masks["lesion"]] = lesion_i
    if modality == "additive":
        img = img + rng.normal(0.0, ADDITIVE_NOISE_STD, size=img.shape)
    else:
        img = img * rng.gamma(SPECKLE_LOOKS, 1.0 / SPECKLE_LOOKS, size=img.shape)
    return img


def make_slice(rng, size, modality, with_lesion):
    organ = _draw_organ(rng, size)
    organ_mask = rasterize(organ, size)
    shapes = {"organ": organ}
    masks = {"organ": organ_mask, "lesion": np.zeros_like(organ_mask)}
    if with_lesion:
        shapes["lesion"] = _draw_lesion(rng, size, organ_mask, organ)
        masks["lesion"] = rasterize(shapes["lesion"], size)
    return _render(rng, masks, modality, size), masks, shapes


# --------------------------------------------------------------------------
# corpus

def raw_labels(ds: DatasetSpec) -> dict:
    """raw value -> structure, numbered in STRUCTURES order."""
    names = [s for s in STRUCTURES if s in ds.annotate]
    return {i + 1: s for i, s in enumerate(names)}


def _label_groups(ds: DatasetSpec) -> list:
    # nested structures go in separate maps so the parent keeps its pixels
    return [[raw] for raw in raw_labels(ds)]


def _lesion_flags(rng, ds: DatasetSpec) -> np.ndarray:
    n_pos = int(round(ds.lesion_rate * ds.count))
    if "lesion" in ds.annotate:
        n_pos = max(n_pos, 1)
    flags = np.zeros(ds.count, dtype=bool)
    flags[rng.permutation(ds.count)[:n_pos]] = True
    return flags


def generate(spec: SynthSpec, out_dir) -> list[Path]:
    """Write every dataset of ``spec`` under ``out_dir``; returns manifest paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    size = spec.image_size
    paths = []
    for k, ds in enumerate(spec.datasets):
        rng = np.random.default_rng([spec.seed, k])
        root = out_dir / f"dataset_{ds.dataset_id}"
        for sub in ("images", "labels", "truth"):
            (root / sub).mkdir(parents=True, exist_ok=True)
        spacing = SPACING[ds.modality]
        labels = raw_labels(ds)
        groups = _label_groups(ds)
        flags = _lesion_flags(rng, ds)
        samples = []
        for n in range(ds.count):
            imgs, truth, shapes = [], {s: [] for s in STRUCTURES}, []
            for _ in range(ds.slices):
                img, masks, sh = make_slice(rng, size, ds.modality, bool(flags[n]))
                imgs.append(img)
                shapes.append(sh)
                for s in STRUCTURES:
                    truth[s].append(masks[s])
            stem = f"{n:04d}"
            write_volume(Volume(np.stack(imgs), spacing), root / "images" / f"{stem}.mmiv")
            label_files = []
            for gi, group in enumerate(groups):
                lab = np.zeros((ds.slices, size, size), dtype=np.uint16)
                for raw in group:
                    lab[np.stack(truth[labels[raw]])] = raw
                rel = f"labels/{stem}_g{gi}.mmiv"
                write_volume(Volume(lab, spacing), root / rel)
                label_files.append(rel)
            truth_files = {}
            for s in STRUCTURES:
                rel = f"truth/{stem}_{s}.mmiv"
                write_volume(Volume(np.stack(truth[s]).astype(np.uint16), spacing), root / rel)
                truth_files[s] = rel
            samples.append({"image": f"images/{stem}.mmiv", "labels": label_files,
                            "truth": truth_files, "shapes": shapes,
                            "has_lesion": bool(flags[n])})
        manifest = {
            "dataset_id": ds.dataset_id,
            "modality": ds.modality,
            "labels": {str(raw): s for raw, s in labels.items()},
            "label_groups": groups,
            "spacing": list(spacing),
            "structures": list(STRUCTURES),
            "parents": PARENT,
            "samples": samples,
        }
        path = root / "manifest.json"
        path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        paths.append(path)
    (out_dir / "synth_spec.json").write_text(json.dumps(spec.to_dict(), indent=1, sort_keys=True)
                                            + "\n", encoding="utf-8")
    return paths
