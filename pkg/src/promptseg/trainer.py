"""Contrastive fine-tuning of the projection heads over frozen backbone features."""
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import log_softmax, softmax

from .data import NORM_MEAN, NORM_STD, CaptionedSample
from .encoders import EmbeddingBatch, ProjectionHead, encode_in_chunks
from .errors import ConfigError, InvalidInputError, ShapeError, TrainingDiverged

CHECKPOINT_VERSION = "promptseg-ckpt/1"
GRID_LEARNING_RATES = (1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 0.5)
GRID_PROJECTION_DIMS = (128, 512)


@dataclass
class TrainerConfig:
    learning_rate: float = 1e-4
    projection_dim: int = 128
    temperature: float = 1.0
    batch_size: int = 8
    max_epochs: int = 20
    plateau_factor: float = 0.9
    plateau_patience: int = 5
    plateau_threshold: float = 1e-4
    weight_decay: float = 1e-2
    dropout: float = 0.1
    target_mode: str = "soft"
    max_steps: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        def bad(name, why):
            raise ConfigError(f"{name} {why}, got {getattr(self, name)!r}", field=f"trainer.{name}")

        if not self.learning_rate > 0:
            bad("learning_rate", "must be > 0")
        if not self.temperature > 0:
            bad("temperature", "must be > 0")
        if not 0 < self.plateau_factor < 1:
            bad("plateau_factor", "must be in (0, 1)")
        if self.batch_size < 2:
            bad("batch_size", "must be >= 2")
        if self.projection_dim < 1:
            bad("projection_dim", "must be >= 1")
        if self.max_epochs < 1:
            bad("max_epochs", "must be >= 1")
        if self.plateau_patience < 1:
            bad("plateau_patience", "must be >= 1")
        if self.weight_decay < 0:
            bad("weight_decay", "must be >= 0")
        if not 0 <= self.dropout < 1:
            bad("dropout", "must be in [0, 1)")
        if self.target_mode not in ("soft", "identity"):
            bad("target_mode", "must be 'soft' or 'identity'")
        if self.max_steps is not None and self.max_steps < 1:
            bad("max_steps", "must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainerConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            key = sorted(unknown)[0]
            raise ConfigError(f"unknown trainer key {key!r}", field=f"trainer.{key}")
        return cls(**d)


@dataclass(frozen=True)
class TrainRecord:
    epoch: int
    train_loss: float
    validation_loss: float
    current_lr: float  # rate in effect during this epoch

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


# --------------------------------------------------------------------------
# objective
# --------------------------------------------------------------------------

def _vectors(emb, name):
    if isinstance(emb, EmbeddingBatch):
        if not emb.normalized:
            raise InvalidInputError(f"{name} embeddings must be L2-normalised")
        return emb.vectors
    return np.asarray(emb, dtype=np.float64)


def _check_pair(text, image, tau):
    if not tau > 0:
        raise ConfigError(f"temperature must be > 0, got {tau}", field="trainer.temperature")
    t, i = _vectors(text, "text"), _vectors(image, "image")
    if t.ndim != 2 or t.shape != i.shape:
        raise ShapeError(f"text {t.shape} and image {i.shape} batches must match")
    return t, i


def similarity_logits(text_emb, image_emb, tau: float = 1.0) -> np.ndarray:
    """``(i, j) = <text_i, image_j> / tau``."""
    t, i = _check_pair(text_emb, image_emb, tau)
    return t @ i.T / tau


def contrastive_targets(text_emb, image_emb, tau: float = 1.0) -> np.ndarray:
    """Soft targets: row softmax of the mean within-modality similarity, over ``tau``."""
    t, i = _check_pair(text_emb, image_emb, tau)
    return softmax((t @ t.T + i @ i.T) / 2.0 / tau, axis=1)


def _check_loss_args(logits, targets):
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[0] != logits.shape[1] or logits.shape != targets.shape:
        raise ShapeError(f"logits {logits.shape} and targets {targets.shape} must be matching square matrices")
    return logits, targets


def clip_loss(logits, targets) -> float:
    """Symmetric soft cross-entropy, averaged over the batch.

    Mean of the text->image (row) and image->text (column) cross-entropies.
    """
    logits, targets = _check_loss_args(logits, targets)
    rows = -(targets * log_softmax(logits, axis=1)).sum(axis=1)
    cols = -(targets * log_softmax(logits, axis=0)).sum(axis=0)
    return float((rows.mean() + cols.mean()) / 2.0)


def clip_loss_grad(logits, targets):
    """``(loss, d loss / d logits)`` with targets held constant."""
    logits, targets = _check_loss_args(logits, targets)
    b = logits.shape[0]
    log_p = log_softmax(logits, axis=1)
    log_q = log_softmax(logits, axis=0)
    loss = (-(targets * log_p).sum() - (targets * log_q).sum()) / (2.0 * b)
    g_rows = np.exp(log_p) * targets.sum(axis=1, keepdims=True) - targets
    g_cols = np.exp(log_q) * targets.sum(axis=0, keepdims=True) - targets
    return float(loss), (g_rows + g_cols) / (2.0 * b)


def batch_loss(text_vecs, image_vecs, config: TrainerConfig):
    """Loss and gradients w.r.t. both embedding batches for one training batch."""
    tau = config.temperature
    logits = similarity_logits(text_vecs, image_vecs, tau)
    if config.target_mode == "identity":
        targets = np.eye(len(logits))
    else:
        targets = contrastive_targets(text_vecs, image_vecs, tau)
    loss, g = clip_loss_grad(logits, targets)
    return loss, g @ image_vecs / tau, g.T @ text_vecs / tau


# --------------------------------------------------------------------------
# optimisation
# --------------------------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay over a flat ``{name: array}`` parameter dict."""

    def __init__(self, lr: float, weight_decay: float = 1e-2, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        b1, b2 = self.betas
        for k, g in grads.items():
            p = params[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            m_hat = self.m[k] / (1 - b1 ** self.t)
            v_hat = self.v[k] / (1 - b2 ** self.t)
            p *= 1.0 - self.lr * self.weight_decay
            p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_dict(self) -> dict:
        out = {"t": np.array(self.t)}
        for k in self.m:
            out[f"m.{k}"] = self.m[k]
            out[f"v.{k}"] = self.v[k]
        return out


class PlateauScheduler:
    """Multiply the rate by ``factor`` once ``patience`` epochs pass without improvement.

    An epoch improves when its metric beats the best so far by more than
    ``threshold``. The bad-epoch counter resets after every decay.
    """

    def __init__(self, lr: float, factor: float = 0.9, patience: int = 5, threshold: float = 1e-4):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.threshold = threshold
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, metric: float) -> float:
        if metric < self.best - self.threshold:
            self.best = metric
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr *= self.factor
                self.bad_epochs = 0
        return self.lr


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------

@dataclass
class FeatureSet:
    """Frozen backbone features for aligned (image, text) pairs."""

    image: np.ndarray
    text: np.ndarray

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        self.text = np.asarray(self.text, dtype=np.float64)
        if len(self.image) != len(self.text):
            raise ShapeError("image and text feature counts differ")

    def __len__(self):
        return len(self.image)


@dataclass
class TrainResult:
    image_head: ProjectionHead
    text_head: ProjectionHead
    records: list
    best_validation_loss: float
    best_epoch: int
    optimizer: AdamW
    config: TrainerConfig


def _pairs(data):
    imgs, txts = [], []
    for item in data:
        if isinstance(item, CaptionedSample):
            imgs.append(item.image_path)
            txts.append(item.caption)
        else:
            img, txt = item
            imgs.append(img)
            txts.append(txt)
    return imgs, txts


def extract_features(data, image_backend, text_backend, chunk: int = 64) -> FeatureSet:
    imgs, txts = _pairs(data)
    return FeatureSet(encode_in_chunks(image_backend, imgs, chunk), encode_in_chunks(text_backend, txts, chunk))


def _eval_batches(n, batch_size):
    starts = list(range(0, n, batch_size))
    bounds = [(s, min(s + batch_size, n)) for s in starts]
    if len(bounds) > 1 and bounds[-1][1] - bounds[-1][0] < 2:
        last = bounds.pop()
        bounds[-1] = (bounds[-1][0], last[1])
    return bounds


def evaluate_loss(image_head, text_head, feats: FeatureSet, config: TrainerConfig) -> float:
    """Size-weighted mean batch loss in evaluation mode (fixed batch order)."""
    total, count = 0.0, 0
    for lo, hi in _eval_batches(len(feats), config.batch_size):
        img = image_head(feats.image[lo:hi])
        txt = text_head(feats.text[lo:hi])
        loss, _, _ = batch_loss(txt, img, config)
        total += loss * (hi - lo)
        count += hi - lo
    return total / count


def init_heads(config: TrainerConfig, image_width: int, text_width: int):
    return (ProjectionHead(image_width, config.projection_dim, seed=config.seed, dropout=config.dropout),
            ProjectionHead(text_width, config.projection_dim, seed=config.seed + 1, dropout=config.dropout))


def train_on_features(config: TrainerConfig, train_feats: FeatureSet, val_feats: FeatureSet,
                      image_head: Optional[ProjectionHead] = None,
                      text_head: Optional[ProjectionHead] = None) -> TrainResult:
    """Fit the two heads; the returned heads are the best-validation snapshot.

    Raises:
        InvalidInputError: on empty data or a batch larger than the train set.
        TrainingDiverged: when a batch loss is not finite.
    """
    if len(train_feats) == 0 or len(val_feats) == 0:
        raise InvalidInputError("train and validation data must be non-empty")
    if config.batch_size > len(train_feats):
        raise InvalidInputError(f"batch_size {config.batch_size} exceeds {len(train_feats)} training pairs")
    if image_head is None or text_head is None:
        ih, th = init_heads(config, train_feats.image.shape[1], train_feats.text.shape[1])
        image_head = image_head or ih
        text_head = text_head or th
    image_head, text_head = image_head.copy(), text_head.copy()

    params = {}
    params.update({f"image.{k}": v for k, v in image_head.params.items()})
    params.update({f"text.{k}": v for k, v in text_head.params.items()})
    opt = AdamW(config.learning_rate, config.weight_decay)
    sched = PlateauScheduler(config.learning_rate, config.plateau_factor, config.plateau_patience,
                             config.plateau_threshold)
    n, bs = len(train_feats), config.batch_size
    records = []
    best = (math.inf, 0, image_head.copy(), text_head.copy())
    steps = 0
    for epoch in range(1, config.max_epochs + 1):
        rng = np.random.default_rng([config.seed, epoch])
        perm = rng.permutation(n)
        lr = opt.lr
        losses = []
        for start in range(0, n - bs + 1, bs):
            idx = perm[start:start + bs]
            img, img_cache = image_head.forward(train_feats.image[idx], train=True, rng=rng)
            txt, txt_cache = text_head.forward(train_feats.text[idx], train=True, rng=rng)
            loss, d_txt, d_img = batch_loss(txt, img, config)
            if not math.isfinite(loss):
                raise TrainingDiverged(epoch, loss)
            grads = {f"image.{k}": g for k, g in image_head.backward(img_cache, d_img).items()}
            grads.update({f"text.{k}": g for k, g in text_head.backward(txt_cache, d_txt).items()})
            opt.step(params, grads)
            losses.append(loss)
            steps += 1
            if config.max_steps is not None and steps >= config.max_steps:
                break
        val_loss = evaluate_loss(image_head, text_head, val_feats, config)
        if not math.isfinite(val_loss):
            raise TrainingDiverged(epoch, val_loss)
        records.append(TrainRecord(epoch, float(np.mean(losses)), float(val_loss), float(lr)))
        if val_loss < best[0]:
            best = (val_loss, epoch, image_head.copy(), text_head.copy())
        opt.lr = sched.step(val_loss)
        if config.max_steps is not None and steps >= config.max_steps:
            break
    return TrainResult(best[2], best[3], records, float(best[0]), best[1], opt, config)


def train(config: TrainerConfig, train_data, val_data, image_backend, text_backend,
          image_head=None, text_head=None) -> TrainResult:
    """Extract frozen features once, then :func:`train_on_features`.

    ``train_data``/``val_data`` hold :class:`CaptionedSample` items or
    ``(image_input, text)`` pairs that the backends understand.
    """
    if not len(train_data) or not len(val_data):
        raise InvalidInputError("train and validation data must be non-empty")
    return train_on_features(config,
                             extract_features(train_data, image_backend, text_backend),
                             extract_features(val_data, image_backend, text_backend),
                             image_head, text_head)


def write_train_log(records: Sequence[TrainRecord], path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


# --------------------------------------------------------------------------
# grid search
# --------------------------------------------------------------------------

@dataclass
class GridCell:
    config: TrainerConfig
    best_validation_loss: float
    error: Optional[str] = None


def select_winner(cells: Sequence[GridCell]) -> Optional[int]:
    """Index of the lowest finite loss; ties go to lower learning rate, then lower dim."""
    finite = [i for i, c in enumerate(cells) if math.isfinite(c.best_validation_loss)]
    if not finite:
        return None
    return min(finite, key=lambda i: (cells[i].best_validation_loss, cells[i].config.learning_rate,
                                      cells[i].config.projection_dim))


@dataclass
class GridResult:
    cells: list
    winner: Optional[int] = field(default=None)

    def __post_init__(self):
        if self.winner is None:
            self.winner = select_winner(self.cells)

    def table(self) -> list:
        return [{"learning_rate": c.config.learning_rate, "projection_dim": c.config.projection_dim,
                 "validation_loss": c.best_validation_loss if math.isfinite(c.best_validation_loss) else None,
                 "error": c.error}
                for c in self.cells]

    def to_dict(self) -> dict:
        return {"cells": self.table(), "winner": self.winner,
                "configs": [c.config.to_dict() for c in self.cells]}


def default_grid(base: Optional[TrainerConfig] = None, learning_rates=GRID_LEARNING_RATES,
                 projection_dims=GRID_PROJECTION_DIMS) -> list:
    base = base or TrainerConfig()
    return [replace(base, learning_rate=lr, projection_dim=d) for lr in learning_rates for d in projection_dims]


def _default_runner(config, train_feats, val_feats):
    return train_on_features(config, train_feats, val_feats).best_validation_loss


def grid_search(grid: Sequence[TrainerConfig], train_data=None, val_data=None, image_backend=None,
                text_backend=None, runner: Optional[Callable] = None, jobs: int = 1) -> GridResult:
    """Train one model per config and pick the winner.

    ``runner(config, train_feats, val_feats) -> best validation loss`` replaces
    the training run, e.g. to replay recorded outcomes. Diverged cells are
    recorded with an infinite loss rather than aborting the search.
    """
    grid = list(grid)
    if not grid:
        raise InvalidInputError("grid must contain at least one config")
    runner = runner or _default_runner
    if image_backend is not None:
        train_feats = extract_features(train_data, image_backend, text_backend)
        val_feats = extract_features(val_data, image_backend, text_backend)
    else:
        train_feats, val_feats = train_data, val_data

    def run(cfg):
        try:
            return GridCell(cfg, float(runner(cfg, train_feats, val_feats)))
        except TrainingDiverged as exc:
            return GridCell(cfg, math.inf, str(exc))

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            cells = list(pool.map(run, grid))
    else:
        cells = [run(cfg) for cfg in grid]
    return GridResult(cells)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

@dataclass
class Checkpoint:
    image_head: ProjectionHead
    text_head: ProjectionHead
    config: TrainerConfig
    meta: dict


def save_checkpoint(path, image_head: ProjectionHead, text_head: ProjectionHead, config: TrainerConfig,
                    optimizer: Optional[AdamW] = None, backends: Optional[dict] = None,
                    extra: Optional[dict] = None) -> None:
    """Single ``.npz`` archive: head weights, optimiser state and a JSON metadata blob."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "trainer": config.to_dict(),
        "image_head": image_head.hyperparameters(),
        "text_head": text_head.hyperparameters(),
        "normalization": {"mean": list(NORM_MEAN), "std": list(NORM_STD)},
        "backends": backends or {},
        "extra": extra or {},
    }
    arrays = {}
    arrays.update(image_head.state_dict("image."))
    arrays.update(text_head.state_dict("text."))
    if optimizer is not None:
        arrays.update({f"opt.{k}": v for k, v in optimizer.state_dict().items()})
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> Checkpoint:
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {meta.get('version')!r}")
        heads = []
        for prefix in ("image", "text"):
            hp = dict(meta[f"{prefix}_head"])
            head = ProjectionHead(hp.pop("d_in"), hp.pop("projection_dim"), **hp)
            head.load_state_dict(z, prefix=f"{prefix}.")
            heads.append(head)
    return Checkpoint(heads[0], heads[1], TrainerConfig.from_dict(meta["trainer"]), meta)


def model_from_checkpoint(path, image_backend, text_backend):
    """:class:`EmbeddingModel` with the checkpoint's heads on the given backends."""
    from pathlib import Path

    from .encoders import EmbeddingModel

    if path is None or not Path(path).is_file():
        raise ConfigError(f"checkpoint {path} does not exist", field="checkpoint")
    ckpt = load_checkpoint(path)
    for head, backend in ((ckpt.image_head, image_backend), (ckpt.text_head, text_backend)):
        if head.d_in != backend.width:
            raise ConfigError(f"checkpoint head expects width {head.d_in}, backend "
                              f"{backend.descriptor} gives {backend.width}", field="checkpoint")
    return EmbeddingModel(image_backend, text_backend, ckpt.image_head, ckpt.text_head)
