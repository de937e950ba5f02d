"""Manifests, recording-level splits, CE loss, Adam, training loop and metrics."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .frontend import MelConfig, wav_to_features
from .model import Model
from .ops import _result
from .tensor import CORE, GradientTape, Tensor, load_tensor, span

log = logging.getLogger(__name__)

MANIFEST_FIELDS = ("path", "label", "recording_id")
EPOCH_LOG_FIELDS = ("epoch", "train_loss", "val_loss", "val_acc", "val_macro_f1")


# ------------------------------------------------------------------- manifest

@dataclass(frozen=True)
class ManifestRow:
    path: str
    label: int
    recording_id: str


@dataclass
class Manifest:
    rows: list[ManifestRow] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for r in self.rows:
            if not r.recording_id:
                raise ValueError(f"manifest row {r.path!r} has an empty recording_id")
            if r.label < 0:
                raise ValueError(f"manifest row {r.path!r} has negative label {r.label}")
            if r.path in seen:
                raise ValueError(f"duplicate manifest path {r.path!r}")
            seen.add(r.path)

    def __len__(self) -> int:
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    @property
    def recording_ids(self) -> list[str]:
        return sorted({r.recording_id for r in self.rows})

    def check_labels(self, n_classes: int) -> None:
        bad = [r for r in self.rows if not 0 <= r.label < n_classes]
        if bad:
            raise ValueError(f"label {bad[0].label} of {bad[0].path!r} outside [0, {n_classes})")

    @classmethod
    def read_csv(cls, path: str | Path) -> "Manifest":
        base = Path(path).parent
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or tuple(reader.fieldnames[:3]) != MANIFEST_FIELDS:
                raise ValueError(f"{path}: manifest header must be {','.join(MANIFEST_FIELDS)}, "
                                 f"got {reader.fieldnames}")
            rows = []
            for line, rec in enumerate(reader, start=2):
                try:
                    label = int(rec["label"])
                except (TypeError, ValueError):
                    raise ValueError(f"{path}:{line}: label {rec['label']!r} is not an integer") from None
                p = rec["path"]
                if not Path(p).is_absolute():
                    p = str(base / p)
                rows.append(ManifestRow(p, label, rec["recording_id"]))
        return cls(rows)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(MANIFEST_FIELDS)
            for r in self.rows:
                w.writerow((r.path, r.label, r.recording_id))


def split_recordings(manifest: Manifest, ratio: Sequence[float] = (7, 1, 2),
                     seed: int = 0) -> tuple[Manifest, Manifest, Manifest]:
    """Partition recordings (never clips) into train/val/test subsets."""
    recs = manifest.recording_ids
    if not recs:
        raise ValueError("cannot split an empty manifest")
    r = np.asarray(ratio, dtype=float) / float(np.sum(ratio))
    n = len(recs)
    n_train = int(round(r[0] * n))
    n_val = int(round(r[1] * n))
    n_train = min(n_train, n)
    n_val = min(n_val, n - n_train)
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [recs[i] for i in order]
    parts = (set(shuffled[:n_train]), set(shuffled[n_train:n_train + n_val]), set(shuffled[n_train + n_val:]))
    return tuple(Manifest([row for row in manifest.rows if row.recording_id in p]) for p in parts)


def load_features(manifest: Manifest, cfg: MelConfig = MelConfig()) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Stack features for every row: SFT1 files are one clip, WAV files are segmented."""
    xs, ys, recs = [], [], []
    for row in manifest:
        if row.path.lower().endswith(".wav"):
            feats = [t.data for t in wav_to_features(row.path, row.recording_id, cfg)]
        else:
            feats = [load_tensor(row.path).data.astype(np.float64)]
        for f in feats:
            xs.append(f.reshape(1, cfg.n_mels, cfg.n_frames))
            ys.append(row.label)
            recs.append(row.recording_id)
    if not xs:
        return np.zeros((0, 1, cfg.n_mels, cfg.n_frames)), np.zeros(0, dtype=int), []
    return np.stack(xs), np.asarray(ys, dtype=int), recs


# ------------------------------------------------------------------------ loss

def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax of the true class (fused, log-sum-exp stable)."""
    labels = np.asarray(labels, dtype=int)
    z = logits.data
    squeeze = z.ndim == 1
    if squeeze:
        z = z[None]
        labels = labels.reshape(1)
    n, c = z.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    with span("cross_entropy", CORE):
        zmax = z.max(axis=1, keepdims=True)
        shifted = z - zmax
        lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        logp = shifted - lse
        loss = -logp[np.arange(n), labels].mean()

    def vjp(g):
        grad = np.exp(logp)
        grad[np.arange(n), labels] -= 1.0
        grad *= g / n
        return (grad[0] if squeeze else grad,)

    return _result("cross_entropy", np.asarray(loss), (logits,), vjp)


# ----------------------------------------------------------------------- Adam

@dataclass
class TrainConfig:
    batch_size: int = 48
    lr: float = 1e-3
    max_epochs: int = 200
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    patience: int | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
              cfg: TrainConfig) -> AdamState:
    """One bias-corrected Adam update, applied to the parameter arrays in place."""
    for name, g in grads.items():
        if params[name].shape != g.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter {params[name].shape}")
    state.step += 1
    t = state.step
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        p.data = p.data - cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
    return state


# -------------------------------------------------------------------- metrics

@dataclass
class Metrics:
    accuracy: float
    precision: list[float]
    recall: list[float]
    f1: list[float]
    macro_f1: float
    confusion: np.ndarray

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "macro_f1": self.macro_f1, "precision": self.precision,
                "recall": self.recall, "f1": self.f1, "confusion": self.confusion.tolist()}


def metrics_from_confusion(confusion) -> Metrics:
    """Rows are true classes, columns predictions.  Zero-denominator ratios are 0."""
    cm = np.asarray(confusion, dtype=np.int64)
    total = cm.sum()
    tp = np.diag(cm).astype(float)
    pred = cm.sum(axis=0).astype(float)
    true = cm.sum(axis=1).astype(float)
    prec = np.divide(tp, pred, out=np.zeros_like(tp), where=pred > 0)
    rec = np.divide(tp, true, out=np.zeros_like(tp), where=true > 0)
    denom = prec + rec
    f1 = np.divide(2 * prec * rec, denom, out=np.zeros_like(tp), where=denom > 0)
    acc = float(tp.sum() / total) if total else 0.0
    return Metrics(acc, prec.tolist(), rec.tolist(), f1.tolist(), float(f1.mean()), cm)


def compute_metrics(y_true, y_pred, n_classes: int) -> Metrics:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=int), np.asarray(y_pred, dtype=int)), 1)
    return metrics_from_confusion(cm)


def predict_logits(model: Model, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = []
    for i in range(0, len(x), batch_size):
        out.append(model.forward(Tensor(x[i:i + batch_size]), mode="infer").data)
    return np.concatenate(out) if out else np.zeros((0, model.config.n_classes))


def evaluate_arrays(model: Model, x: np.ndarray, y: np.ndarray) -> tuple[Metrics, float]:
    logits = predict_logits(model, x)
    loss = float(cross_entropy(Tensor(logits), y).data) if len(y) else float("nan")
    return compute_metrics(y, logits.argmax(axis=1), model.config.n_classes), loss


def evaluate(model: Model, manifest: Manifest, cfg: MelConfig = MelConfig()) -> Metrics:
    """Clip-level metrics for every clip referenced by the manifest."""
    x, y, _ = load_features(manifest, cfg)
    manifest.check_labels(model.config.n_classes)
    return evaluate_arrays(model, x, y)[0]


def majority_vote(logits: np.ndarray, recording_ids: Sequence[str]) -> dict[str, int]:
    """Recording-level prediction by majority over clip argmaxes (ties -> lowest class)."""
    votes: dict[str, list[int]] = {}
    for rid, p in zip(recording_ids, np.asarray(logits).argmax(axis=1)):
        votes.setdefault(rid, []).append(int(p))
    return {rid: int(np.bincount(v).argmax()) for rid, v in votes.items()}


# ------------------------------------------------------------------- training

@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    val_acc: float
    val_macro_f1: float

    def as_row(self) -> tuple:
        return (self.epoch, repr(self.train_loss), repr(self.val_loss), repr(self.val_acc), repr(self.val_macro_f1))


def write_epoch_log(logs: Sequence[EpochLog], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EPOCH_LOG_FIELDS)
        for e in logs:
            w.writerow(e.as_row())


def _snapshot(model: Model) -> tuple[dict, dict]:
    return ({k: t.data.copy() for k, t in model.params.items()},
            {k: a.copy() for k, a in model.buffers.items()})


def _restore(model: Model, snap) -> None:
    params, buffers = snap
    for k, t in model.params.items():
        t.data = params[k].copy()
    for k in model.buffers:
        model.buffers[k] = buffers[k].copy()


def train_step(model: Model, xb: np.ndarray, yb: np.ndarray, state: AdamState, cfg: TrainConfig) -> float:
    params = model.params
    names = list(params)
    with GradientTape() as tape:
        logits = model.forward(Tensor(xb), mode="train")
        loss = cross_entropy(logits, yb)
    grads = tape.gradient(loss, [params[k] for k in names])
    adam_step(params, dict(zip(names, grads)), state, cfg)
    return float(loss.data)


def fit(model: Model, x_train: np.ndarray, y_train: np.ndarray, x_val: np.ndarray | None = None,
        y_val: np.ndarray | None = None, cfg: TrainConfig = TrainConfig()) -> tuple[Model, list[EpochLog]]:
    """Mini-batch Adam on CE loss; restores the lowest-validation-loss checkpoint.

    Without validation data, selection falls back to training loss.
    """
    if len(x_train) == 0:
        raise ValueError("training set is empty")
    y_train = np.asarray(y_train, dtype=int)
    if y_train.min() < 0 or y_train.max() >= model.config.n_classes:
        raise ValueError(f"training labels outside [0, {model.config.n_classes})")
    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    logs: list[EpochLog] = []
    best, best_loss, stale = None, np.inf, 0
    has_val = x_val is not None and len(x_val) > 0
    model.train()
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(x_train))
        total = 0.0
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            total += train_step(model, x_train[idx], y_train[idx], state, cfg) * len(idx)
        train_loss = total / len(order)
        model.eval()
        if has_val:
            m, val_loss = evaluate_arrays(model, x_val, np.asarray(y_val, dtype=int))
            entry = EpochLog(epoch, train_loss, val_loss, m.accuracy, m.macro_f1)
        else:
            entry = EpochLog(epoch, train_loss, float("nan"), float("nan"), float("nan"))
        model.train()
        logs.append(entry)
        log.info("epoch %d train_loss %.5f val_loss %.5f val_acc %.4f val_f1 %.4f", *entry.as_row()[:1],
                 entry.train_loss, entry.val_loss, entry.val_acc, entry.val_macro_f1)
        crit = entry.val_loss if has_val else entry.train_loss
        if crit < best_loss:
            best, best_loss, stale = _snapshot(model), crit, 0
        else:
            stale += 1
            if cfg.patience is not None and stale >= cfg.patience:
                break
    if best is not None:
        _restore(model, best)
    model.eval()
    return model, logs


def train(model: Model, train_manifest: Manifest, val_manifest: Manifest | None = None,
          cfg: TrainConfig = TrainConfig(), mel: MelConfig = MelConfig()) -> tuple[Model, list[EpochLog]]:
    train_manifest.check_labels(model.config.n_classes)
    x, y, _ = load_features(train_manifest, mel)
    if len(x) == 0:
        raise ValueError("training manifest yields no clips")
    xv = yv = None
    if val_manifest is not None and len(val_manifest):
        val_manifest.check_labels(model.config.n_classes)
        xv, yv, _ = load_features(val_manifest, mel)
    return fit(model, x, y, xv, yv, cfg)
