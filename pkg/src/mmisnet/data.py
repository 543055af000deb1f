"""Loading manifests' volumes into arrays, and the seeded train/validation split."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import IngestionError, ManifestError
from .labels import DatasetManifest, LabelSpace, encode_target
from .volume import read_volume


@dataclass
class VolumeRecord:
    dataset_id: str
    index: int
    image: np.ndarray        # (D, H, W)
    onehot: np.ndarray       # (D, C, H, W) partial targets
    mask: np.ndarray         # (C,) classes annotated by the source dataset
    spacing: tuple
    truth: np.ndarray | None = None       # (D, C, H, W) full-truth targets
    truth_mask: np.ndarray | None = None  # (C,) classes the sidecar covers

    @property
    def voxel_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def n_slices(self) -> int:
        return self.image.shape[0]


def check_files(manifests) -> None:
    missing = []
    for m in manifests:
        for s in m.samples:
            for rel in [s.image, *s.labels, *s.truth.values()]:
                if not m.path(rel).is_file():
                    missing.append(m.path(rel))
    if missing:
        raise IngestionError(missing)


def structure_of(space: LabelSpace, manifests_by_id: dict, g: int) -> str:
    ds, raw = space.owner(g)
    return manifests_by_id[ds].labels[raw] if ds in manifests_by_id else space.name(g)


def load_records(manifests: list[DatasetManifest], space: LabelSpace,
                 with_truth: bool = False) -> list[VolumeRecord]:
    check_files(manifests)
    by_id = {m.dataset_id: m for m in manifests}
    for m in manifests:
        known = space.raw_to_global.get(m.dataset_id)
        if known is None or set(known) != set(m.labels):
            raise ManifestError(f"dataset {m.dataset_id!r} does not match the label space")
    names = {g: structure_of(space, by_id, g) for g in range(1, space.num_classes + 1)}
    records = []
    for m in manifests:
        for i, s in enumerate(m.samples):
            vol = read_volume(m.path(s.image))
            image = vol.data.astype(np.float64)
            maps = [read_volume(m.path(rel)).data for rel in s.labels]
            D = image.shape[0]
            if maps:
                onehot = np.stack([encode_target([mp[d] for mp in maps], m.dataset_id, space).onehot
                                   for d in range(D)])
            else:
                onehot = np.zeros((D, space.num_classes) + image.shape[1:])
            rec = VolumeRecord(m.dataset_id, i, image, onehot, space.mask(m.dataset_id), vol.spacing)
            if with_truth:
                truth = np.zeros_like(onehot)
                tmask = np.zeros(space.num_classes, dtype=bool)
                cache = {}
                for g, name in names.items():
                    if name not in s.truth:
                        continue
                    if name not in cache:
                        cache[name] = read_volume(m.path(s.truth[name])).data > 0
                    truth[:, g - 1] = cache[name]
                    tmask[g - 1] = True
                rec.truth, rec.truth_mask = truth, tmask
            records.append(rec)
    return records


def split_records(records: list[VolumeRecord], fraction: float, seed: int):
    """Per-dataset seeded split: floor(fraction * n) volumes of each dataset go to validation."""
    train, val = [], []
    ids = sorted({r.dataset_id for r in records})
    for k, ds in enumerate(ids):
        mine = [r for r in records if r.dataset_id == ds]
        n_val = int(np.floor(fraction * len(mine)))
        order = np.random.default_rng([seed, k]).permutation(len(mine))
        chosen = set(order[:n_val].tolist())
        for j, r in enumerate(mine):
            (val if j in chosen else train).append(r)
    return train, val


def slices_of(records: list[VolumeRecord]):
    """Flatten volumes into per-slice (image, onehot, mask) training items."""
    items = []
    for r in records:
        for d in range(r.n_slices):
            items.append((r.image[d], r.onehot[d], r.mask))
    return items


def stack_batch(items):
    x = np.stack([it[0] for it in items])[:, None]
    y = np.stack([it[1] for it in items])
    m = np.stack([it[2] for it in items])
    return x, y, m


def resolve_path(base: Path, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else base / p
