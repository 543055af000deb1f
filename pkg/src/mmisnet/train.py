"""Training loop (Adam, early stopping), inference helpers and overlay output."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import load_records, slices_of, split_records, stack_batch
from .errors import ConfigError, NumericError, ShapeError, TrainingDiverged
from .fusion import FusionConfig
from .labels import LabelSpace, build_label_space
from .loss import LossConfig, total_loss
from .metrics import EvalReport, binarize, evaluate_records
from .network import Checkpoint, NetworkConfig, as_tensors, forward, init_parameters
from .volume import Volume, read_volume, write_volume

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    max_epochs: int = 1000
    batch_size: int = 4
    patience: int = 20
    min_delta: float = 1e-5
    seed: int = 0
    validation_fraction: float = 0.2
    base_channels: int = 8
    depth: int = 3
    loss: LossConfig = field(default_factory=LossConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ConfigError("max_epochs and batch_size must be >= 1")
        if self.patience < 0 or self.patience >= self.max_epochs:
            raise ConfigError("patience must satisfy 0 <= patience < max_epochs")
        if self.min_delta < 0:
            raise ConfigError("min_delta must be non-negative")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ConfigError("validation_fraction must lie in [0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        if "loss" in d:
            d["loss"] = LossConfig.from_dict(d["loss"])
        if "fusion" in d:
            d["fusion"] = FusionConfig.from_dict(d["fusion"])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc

    def to_dict(self) -> dict:
        return {"learning_rate": self.learning_rate, "max_epochs": self.max_epochs,
                "batch_size": self.batch_size, "patience": self.patience,
                "min_delta": self.min_delta, "seed": self.seed,
                "validation_fraction": self.validation_fraction,
                "base_channels": self.base_channels, "depth": self.depth,
                "loss": self.loss.to_dict(), "fusion": self.fusion.to_dict()}


# --------------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place.

    Parameters without a gradient entry are left alone (their moments too).
    A non-finite gradient aborts before anything is modified.
    """
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name}")
    t = state.step + 1
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, g in grads.items():
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(params[name])
            v = np.zeros_like(params[name])
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    state.step = t
    return state


# --------------------------------------------------------------------------
# batches

def loss_and_grads(ck: Checkpoint, x, onehot, mask, loss_cfg: LossConfig):
    params = as_tensors(ck.parameters, requires_grad=True)
    with T.Tape() as tape:
        loss = total_loss(forward(x, params, ck.config), onehot, mask, loss_cfg)
        tape.backward(loss)
    grads = {k: t.grad for k, t in params.items() if t.grad is not None}
    return loss.data.item(), grads


def batch_loss(ck: Checkpoint, items, batch_size: int, loss_cfg: LossConfig) -> float:
    """Slice-weighted mean loss over ``items`` without recording gradients."""
    total, n = 0.0, 0
    with T.no_grad():
        for lo in range(0, len(items), batch_size):
            x, y, m = stack_batch(items[lo:lo + batch_size])
            total += total_loss(forward(x, ck), y, m, loss_cfg).data.item() * len(x)
            n += len(x)
    return total / n


def predictor(ck: Checkpoint, batch_size: int = 8):
    """Callable mapping a (S, 1, H, W) batch to (S, C, H, W) probabilities."""
    def run(images):
        out = []
        with T.no_grad():
            for lo in range(0, len(images), batch_size):
                out.append(forward(np.asarray(images[lo:lo + batch_size], dtype=np.float64), ck).data)
        return np.concatenate(out)
    return run


# --------------------------------------------------------------------------
# training

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list
    stopped_epoch: int
    checkpoint_path: Path | None
    log_path: Path | None
    space: LabelSpace
    train_records: list
    val_records: list


def _write_log(path, history):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss"])
        for row in history:
            w.writerow([row[0], repr(row[1]), repr(row[2])])


def train(cfg: TrainConfig, manifests, out_dir=None, records=None, on_epoch=None) -> TrainResult:
    """Mixed-dataset training with per-sample class masks and early stopping.

    The monitored quantity is validation total loss, or the epoch's mean
    training loss when the split leaves no validation volumes. The best
    checkpoint is kept in memory and, with ``out_dir``, at ``best.mmck``
    alongside ``train_log.csv``.
    """
    space = build_label_space(manifests)
    if records is None:
        records = load_records(manifests, space)
    train_recs, val_recs = split_records(records, cfg.validation_fraction, cfg.seed)
    items, val_items = slices_of(train_recs), slices_of(val_recs)
    if not items:
        raise ConfigError("no training slices after the validation split")

    net_cfg = NetworkConfig(in_channels=1, base_channels=cfg.base_channels, depth=cfg.depth,
                            num_classes=space.num_classes, fusion=cfg.fusion)
    ck = init_parameters(net_cfg, cfg.seed)
    ck.label_space = space.to_dict()
    ck.meta = {"train_config": cfg.to_dict()}
    state = AdamState()
    best = ck.copy()

    out = Path(out_dir) if out_dir is not None else None
    ck_path = log_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        ck_path, log_path = out / "best.mmck", out / "train_log.csv"
        best.save(ck_path)  # the last good state exists from the start

    rng = np.random.default_rng(cfg.seed)
    history = []
    wait = 0
    epoch = 0
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            order = rng.permutation(len(items))
            run_loss, seen = 0.0, 0
            for lo in range(0, len(order), cfg.batch_size):
                x, y, m = stack_batch([items[i] for i in order[lo:lo + cfg.batch_size]])
                loss, grads = loss_and_grads(ck, x, y, m, cfg.loss)
                adam_step(ck.parameters, grads, state, cfg.learning_rate)
                run_loss += loss * len(x)
                seen += len(x)
            train_loss = run_loss / seen
            val_loss = batch_loss(ck, val_items, cfg.batch_size, cfg.loss) if val_items else float("nan")
            monitor = val_loss if val_items else train_loss
            if not np.isfinite(monitor):
                raise NumericError(f"monitored loss is {monitor} at epoch {epoch}")
            history.append((epoch, train_loss, val_loss))
            if on_epoch is not None:
                on_epoch(epoch, train_loss, val_loss)
            logger.info("epoch %d train %.6f val %.6f", epoch, train_loss, val_loss)
            ck.adam_m, ck.adam_v, ck.step, ck.epoch = state.m, state.v, state.step, epoch
            if best.best_val_loss - monitor > cfg.min_delta:
                ck.best_val_loss = monitor
                best = ck.copy()
                wait = 0
                if ck_path is not None:
                    best.save(ck_path)
            else:
                wait += 1
                if wait >= cfg.patience:
                    break
    except NumericError as exc:
        if log_path is not None:
            _write_log(log_path, history)
        raise TrainingDiverged(f"training diverged at epoch {epoch}: {exc}", ck_path) from exc
    finally:
        if log_path is not None:
            _write_log(log_path, history)
    return TrainResult(best, history, epoch, ck_path, log_path, space, train_recs, val_recs)


# --------------------------------------------------------------------------
# evaluation and prediction

def label_space_of(ck: Checkpoint) -> LabelSpace:
    if ck.label_space is None:
        raise ConfigError("checkpoint carries no label space")
    return LabelSpace.from_dict(ck.label_space)


def evaluate(ck: Checkpoint, manifests, threshold: float = 0.5, use_truth: bool = False,
             split: str = "all", records=None) -> EvalReport:
    """Score a checkpoint on manifests' volumes; ``split`` reuses the training split."""
    space = label_space_of(ck)
    for m in manifests:
        known = space.raw_to_global.get(m.dataset_id)
        if known is None or set(known) != set(m.labels):
            raise ConfigError(f"dataset {m.dataset_id!r} is not part of the checkpoint's label space")
    if records is None:
        records = load_records(manifests, space, with_truth=use_truth)
    if split != "all":
        tc = ck.meta.get("train_config", {})
        tr, va = split_records(records, tc.get("validation_fraction", 0.2), tc.get("seed", 0))
        records = va if split == "val" else tr
    return evaluate_records(predictor(ck), records, space, threshold, use_truth)


PALETTE = [
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200), (245, 130, 48),
    (145, 30, 180), (70, 240, 240), (240, 50, 230), (210, 245, 60), (250, 190, 212),
    (0, 128, 128), (220, 190, 255), (170, 110, 40), (255, 250, 200), (128, 0, 0),
    (170, 255, 195), (128, 128, 0), (255, 215, 180), (0, 0, 128), (128, 128, 128),
]


def write_ppm(path, rgb: np.ndarray):
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes())


def overlay(image: np.ndarray, masks: np.ndarray, classes) -> np.ndarray:
    """Grayscale base with each class's mask blended 50% in its palette colour."""
    lo, hi = float(image.min()), float(image.max())
    gray = np.zeros_like(image) if hi <= lo else (image - lo) / (hi - lo) * 255.0
    rgb = np.repeat(gray[..., None], 3, axis=2)
    for ch, g in enumerate(classes):
        on = masks[ch]
        color = np.array(PALETTE[(g - 1) % len(PALETTE)], dtype=np.float64)
        rgb[on] = 0.5 * rgb[on] + 0.5 * color
    return np.round(rgb).astype(np.uint8)


def _resize_nearest(arr, h, w):
    H, W = arr.shape[-2:]
    rows = np.minimum((np.arange(h) * H) // h, H - 1)
    cols = np.minimum((np.arange(w) * W) // w, W - 1)
    return arr[..., rows[:, None], cols[None, :]]


def predict(ck: Checkpoint, volume_path, threshold: float = 0.5, out_dir=None,
            resize: bool = False) -> dict:
    """Segment every slice of a volume; optionally write masks and overlays.

    Writes ``class_<g>.mmiv`` (uint16 0/1 per class) and
    ``overlay_<slice>.ppm`` into ``out_dir``. Returns the binary masks
    as a (D, C, H, W) bool array under ``"masks"`` and file paths.
    """
    vol = read_volume(volume_path)
    image = vol.data.astype(np.float64)
    D, H, W = image.shape
    m = 2 ** ck.config.depth
    if H % m or W % m:
        if not resize:
            raise ShapeError(f"volume slices {H}x{W} not divisible by {m}; pass resize to rescale")
        h2, w2 = -(-H // m) * m, -(-W // m) * m
        probs = predictor(ck)(_resize_nearest(image, h2, w2)[:, None])
        rows = np.minimum((np.arange(H) * h2) // H, h2 - 1)
        cols = np.minimum((np.arange(W) * w2) // W, w2 - 1)
        probs = probs[..., rows[:, None], cols[None, :]]
    else:
        probs = predictor(ck)(image[:, None])
    masks = binarize(probs, threshold)
    classes = list(range(1, ck.config.num_classes + 1))
    result = {"masks": masks, "probabilities": probs, "files": []}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for ch, g in enumerate(classes):
            p = out / f"class_{g}.mmiv"
            write_volume(Volume(masks[:, ch].astype(np.uint16), vol.spacing), p)
            result["files"].append(p)
        for d in range(D):
            p = out / f"overlay_{d:03d}.ppm"
            write_ppm(p, overlay(image[d], masks[d], classes))
            result["files"].append(p)
    return result
