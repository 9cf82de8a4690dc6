"""Learned pairwise dependency predictor.

Masked positions are featurized into rows of ``H``; the predicted dependency
of row ``i`` on row ``j`` is ``sigmoid(q_i . k_j / sqrt(d))`` with
``Q = H W_Q`` and ``K = H W_K``. Training regresses single-realization TV
targets from a precomputed cache with a squared-error objective.
"""

import json
import logging
import math
from collections.abc import Iterable, Iterator, Mapping, Sequence
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit
from tqdm import tqdm

from depdecode.errors import (
    ConfigError,
    DimensionMismatch,
    EmptyCache,
    FormatVersionMismatch,
    NonFiniteLoss,
)
from depdecode.oracle import MaskState, TabularModel, all_marginals, sample_joint
from depdecode.sampling import IDENTITY_SAMPLER, transform_sample
from depdecode.tv import DependencyMatrix, dependency_sample
from depdecode.utils import spawn_rng

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class FeatureConfig:
    vocab_size: int
    length: int
    marginal: bool = True
    position: bool = True
    revealed: bool = True

    def __post_init__(self):
        if not (self.marginal or self.position or self.revealed):
            raise ValueError("At least one feature component must be enabled")

    @property
    def d(self) -> int:
        return (
            self.vocab_size * self.marginal
            + self.length * self.position
            + self.length * self.revealed
        )

    @classmethod
    def for_model(cls, model: TabularModel, **flags) -> "FeatureConfig":
        return cls(model.vocab.size, model.length, **flags)


def featurize(model: TabularModel, state: MaskState, cfg: FeatureConfig) -> np.ndarray:
    """
    Feature rows for the masked positions, shape (|M|, d).

    Row ``i`` concatenates, for masked position ``m_i`` and in this order: its
    marginal vector, a one-hot of its position, and the revealed-position
    bitmap of the whole state.
    """
    if (cfg.vocab_size, cfg.length) != (model.vocab.size, model.length):
        raise DimensionMismatch("Feature config does not match the model shape")
    n = len(state.masked)
    blocks = []
    if cfg.marginal:
        blocks.append(all_marginals(model, state))
    if cfg.position:
        blocks.append(np.eye(cfg.length)[list(state.masked)].reshape(n, cfg.length))
    if cfg.revealed:
        bitmap = np.zeros(cfg.length)
        bitmap[list(state.revealed)] = 1.0
        blocks.append(np.tile(bitmap, (n, 1)))
    return np.hstack(blocks) if n else np.zeros((0, cfg.d))


@dataclass(frozen=True, eq=False)
class PredictorWeights:
    w_q: np.ndarray
    w_k: np.ndarray
    merged: np.ndarray | None = None

    def __post_init__(self):
        w_q = np.asarray(self.w_q, dtype=np.float64)
        w_k = np.asarray(self.w_k, dtype=np.float64)
        if w_q.ndim != 2 or w_q.shape[0] != w_q.shape[1] or w_q.shape != w_k.shape:
            raise DimensionMismatch(f"Projections must be d x d: {w_q.shape}, {w_k.shape}")
        object.__setattr__(self, "w_q", w_q)
        object.__setattr__(self, "w_k", w_k)
        if self.merged is not None:
            merged = np.asarray(self.merged, dtype=np.float64)
            if merged.shape != w_q.shape:
                raise DimensionMismatch(f"Merged weights have shape {merged.shape}")
            if not np.allclose(merged, w_q @ w_k.T, rtol=1e-9, atol=1e-6):
                raise ValueError("Merged weights differ from W_Q W_K^T")
            object.__setattr__(self, "merged", merged)

    @property
    def d(self) -> int:
        return self.w_q.shape[0]

    def with_merged(self) -> "PredictorWeights":
        return PredictorWeights(self.w_q, self.w_k, self.w_q @ self.w_k.T)

    @classmethod
    def initial(cls, d: int, rng: np.random.Generator, scale: float = 0.1):
        return cls(rng.normal(0.0, scale, (d, d)), rng.normal(0.0, scale, (d, d)))


def predict_dependency(
    H: np.ndarray, weights: PredictorWeights, order: Sequence[int] | None = None
) -> DependencyMatrix:
    """Predicted dependency matrix for feature rows ``H``; merged path when present."""
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 2 or H.shape[1] != weights.d:
        raise DimensionMismatch(f"Features have shape {H.shape}, expected (*, {weights.d})")
    scale = math.sqrt(weights.d)
    if weights.merged is not None:
        logits = H @ weights.merged @ H.T / scale
    else:
        logits = (H @ weights.w_q) @ (H @ weights.w_k).T / scale
    values = expit(logits)
    np.fill_diagonal(values, 0.0)
    order = tuple(range(len(H))) if order is None else tuple(order)
    return DependencyMatrix(order, values, source="predicted")


@dataclass(frozen=True, eq=False)
class PredictedDependency:
    """Dependency source for the demask selector backed by a trained predictor."""

    weights: PredictorWeights
    cfg: FeatureConfig

    def __call__(self, model: TabularModel, state: MaskState) -> DependencyMatrix:
        H = featurize(model, state, self.cfg)
        return predict_dependency(H, self.weights, state.masked)


@dataclass(eq=False)
class TVCacheRecord:
    model_id: str
    t: float
    masked: tuple[int, ...]
    revealed: dict[int, int]
    j: int
    y: int
    # D_{i,j}(y) for every masked i, in masked order; 0 at j itself.
    d_column: tuple[float, ...]
    feature_seed: int
    features: np.ndarray | None = None

    @property
    def length(self) -> int:
        return len(self.masked) + len(self.revealed)

    def state(self) -> MaskState:
        return MaskState(self.length, self.revealed, self.masked)

    def to_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "t": self.t,
            "masked": list(self.masked),
            "revealed": [[p, v] for p, v in sorted(self.revealed.items())],
            "j": self.j,
            "y": self.y,
            "d_column": list(self.d_column),
            "feature_seed": self.feature_seed,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "TVCacheRecord":
        d_column = tuple(float(v) for v in data["d_column"])
        if len(d_column) != len(data["masked"]):
            raise DimensionMismatch("d_column length must equal the masked count")
        if any(not 0 <= v <= 1 for v in d_column):
            raise ValueError("Cached dependencies must lie in [0, 1]")
        return cls(
            model_id=data["model_id"],
            t=float(data["t"]),
            masked=tuple(int(p) for p in data["masked"]),
            revealed={int(p): int(v) for p, v in data["revealed"]},
            j=int(data["j"]),
            y=int(data["y"]),
            d_column=d_column,
            feature_seed=int(data["feature_seed"]),
        )


def generate_tv_cache(
    models: Sequence[TabularModel],
    samples_per_response: int = 5,
    seed: int = 0,
    mask_ratio: float | None = None,
    feature_cfg: FeatureConfig | None = None,
    progress: bool = False,
) -> Iterator[TVCacheRecord]:
    """
    Stream single-realization dependency columns for random masks.

    For each model and sample a response is drawn from the joint, a ratio
    ``t ~ U(0, 1)`` (or ``mask_ratio``) masks ``ceil(t * N)`` positions chosen
    uniformly, and for each masked ``j`` a value ``y`` is drawn from its exact
    marginal. The record holds ``D_{i,j}(y)`` for every masked ``i``. Each
    (model, sample) pair draws from its own generator keyed on
    ``(seed, model index, sample index)``.
    """
    work = [(m, s) for m in range(len(models)) for s in range(samples_per_response)]
    for m, s in tqdm(work, disable=not progress, desc="tv-cache"):
        model = models[m]
        rng = spawn_rng(seed, m, s)
        response = sample_joint(model, rng)
        t = float(rng.random()) if mask_ratio is None else float(mask_ratio)
        n_mask = math.ceil(t * model.length)
        masked = sorted(int(p) for p in rng.choice(model.length, n_mask, replace=False))
        revealed = {p: response[p] for p in range(model.length) if p not in masked}
        state = MaskState(model.length, revealed, tuple(masked))
        features = featurize(model, state, feature_cfg) if feature_cfg else None
        marginals = all_marginals(model, state)
        for col, j in enumerate(masked):
            y = transform_sample(marginals[col], IDENTITY_SAMPLER, rng)
            column = tuple(
                0.0 if i == j else dependency_sample(model, state, i, j, y)
                for i in masked
            )
            yield TVCacheRecord(
                model_id=model.prompt_id,
                t=t,
                masked=tuple(masked),
                revealed=dict(revealed),
                j=j,
                y=y,
                d_column=column,
                feature_seed=model.seed,
                features=features,
            )


def write_tv_cache(records: Iterable[TVCacheRecord], path) -> int:
    count = 0
    with open(path, "w") as f:
        for record in records:
            f.write(json.dumps(record.to_dict()) + "\n")
            count += 1
    logger.info("Wrote %d cache records to %s", count, path)
    return count


def read_tv_cache(path) -> list[TVCacheRecord]:
    with open(path) as f:
        return [TVCacheRecord.from_dict(json.loads(line)) for line in f if line.strip()]


def attach_features(
    records: Iterable[TVCacheRecord],
    models: Sequence[TabularModel],
    cfg: FeatureConfig,
) -> list[TVCacheRecord]:
    """Recompute feature matrices for records loaded without them."""
    by_id = {model.prompt_id: model for model in models}
    out = []
    for record in records:
        if record.model_id not in by_id:
            raise ConfigError(f"No model with id {record.model_id!r} for cache record")
        features = featurize(by_id[record.model_id], record.state(), cfg)
        out.append(replace(record, features=features))
    return out


@dataclass(frozen=True)
class TrainingConfig:
    lr: float = 1e-2
    weight_decay: float = 0.01
    epochs: int = 5
    batch_size: int = 32
    warmup_fraction: float = 0.05
    val_fraction: float = 0.1
    init_scale: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("lr and weight_decay must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not 0 <= self.warmup_fraction < 1 or not 0 <= self.val_fraction < 1:
            raise ValueError("warmup_fraction and val_fraction must be in [0, 1)")


@dataclass(frozen=True, eq=False)
class TrainingExample:
    features: np.ndarray
    column: int
    targets: np.ndarray

    @property
    def n_pairs(self) -> int:
        return len(self.targets) - 1


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float | None
    lr: float
    # Held-out mean absolute error over off-diagonal pairs.
    val_mae: float | None = None


@dataclass
class TrainingReport:
    initial_train_loss: float
    initial_val_loss: float | None
    n_train: int
    n_val: int
    initial_val_mae: float | None = None
    epochs: list[EpochStats] = field(default_factory=list)
    best_epoch: int = 0
    best_loss: float = math.inf


def _examples(records: Iterable[TVCacheRecord]) -> list[TrainingExample]:
    examples = []
    for record in records:
        if record.features is None:
            raise ValueError("Cache record has no features; call attach_features first")
        if len(record.masked) < 2:
            continue
        examples.append(
            TrainingExample(
                np.asarray(record.features, dtype=np.float64),
                record.masked.index(record.j),
                np.asarray(record.d_column, dtype=np.float64),
            )
        )
    return examples


def loss_and_grad(
    w_q: np.ndarray, w_k: np.ndarray, batch: Sequence[TrainingExample]
) -> tuple[float, np.ndarray, np.ndarray]:
    """
    Mean squared error over the off-diagonal pairs of a batch, with gradients.

    For an example with revealed row ``j``, ``z_i = q_i . k_j / sqrt(d)`` and
    ``dz_i/dW_Q = h_i (x) k_j / sqrt(d)``, ``dz_i/dW_K = h_j (x) q_i / sqrt(d)``.
    """
    d = w_q.shape[0]
    scale = math.sqrt(d)
    n_pairs = sum(ex.n_pairs for ex in batch)
    if n_pairs == 0:
        raise EmptyCache("Batch has no off-diagonal pairs")
    loss = 0.0
    grad_q = np.zeros_like(w_q)
    grad_k = np.zeros_like(w_k)
    for ex in batch:
        H = ex.features
        Q = H @ w_q
        k_j = H[ex.column] @ w_k
        s = expit(Q @ k_j / scale)
        err = s - ex.targets
        err[ex.column] = 0.0
        loss += float(err @ err)
        g = 2.0 * err * s * (1.0 - s) / scale
        grad_q += np.outer(H.T @ g, k_j)
        grad_k += np.outer(H[ex.column], Q.T @ g)
    return loss / n_pairs, grad_q / n_pairs, grad_k / n_pairs


def _mean_loss(weights: PredictorWeights, examples: Sequence[TrainingExample]):
    if not examples:
        return None
    return loss_and_grad(weights.w_q, weights.w_k, examples)[0]


def _mean_abs_error(weights: PredictorWeights, examples: Sequence[TrainingExample]):
    if not examples:
        return None
    scale = math.sqrt(weights.d)
    total, n_pairs = 0.0, 0
    for ex in examples:
        H = ex.features
        s = expit((H @ weights.w_q) @ (H[ex.column] @ weights.w_k) / scale)
        err = np.abs(s - ex.targets)
        err[ex.column] = 0.0
        total += float(err.sum())
        n_pairs += ex.n_pairs
    return total / n_pairs


def _schedule(step: int, total: int, warmup: int, lr: float) -> float:
    """Linear warmup then cosine decay; ``step`` counts from 1."""
    if warmup and step <= warmup:
        return lr * step / warmup
    progress = (step - warmup) / max(1, total - warmup)
    return lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def train_predictor(
    cache: Iterable[TVCacheRecord],
    cfg: FeatureConfig,
    hyper: TrainingConfig = TrainingConfig(),
    seed: int = 0,
    progress: bool = False,
) -> tuple[PredictorWeights, TrainingReport]:
    """
    Fit the predictor to cached dependency columns with AdamW.

    Parameters:
    -----------
    cache : iterable of TVCacheRecord
        Records with features attached
    cfg : FeatureConfig
        Feature layout; fixes d
    hyper : TrainingConfig
        Optimizer, schedule and split settings
    seed : int
        Seeds the validation split, initialization and batch shuffling

    Returns:
    --------
    (PredictorWeights, TrainingReport)
        Weights of the epoch with the lowest validation loss (training loss
        when there is no validation split), merged form included
    """
    examples = _examples(cache)
    if not examples:
        raise EmptyCache("Cache holds no records with at least two masked positions")
    for ex in examples:
        if ex.features.shape[1] != cfg.d:
            raise DimensionMismatch(
                f"Features have width {ex.features.shape[1]}, expected {cfg.d}"
            )

    split_rng = spawn_rng(seed, 0)
    order = split_rng.permutation(len(examples))
    n_val = min(int(round(hyper.val_fraction * len(examples))), len(examples) - 1)
    val = [examples[i] for i in order[:n_val]]
    train = [examples[i] for i in order[n_val:]]

    weights = PredictorWeights.initial(cfg.d, spawn_rng(seed, 1), hyper.init_scale)
    w_q, w_k = weights.w_q.copy(), weights.w_k.copy()
    moments = [np.zeros_like(w_q) for _ in range(4)]

    report = TrainingReport(
        initial_train_loss=_mean_loss(weights, train),
        initial_val_loss=_mean_loss(weights, val),
        n_train=len(train),
        n_val=len(val),
        initial_val_mae=_mean_abs_error(weights, val),
    )
    report.best_loss = report.initial_val_loss if val else report.initial_train_loss
    best = weights

    steps_per_epoch = math.ceil(len(train) / hyper.batch_size)
    total = hyper.epochs * steps_per_epoch
    warmup = math.ceil(hyper.warmup_fraction * total)
    shuffle_rng = spawn_rng(seed, 2)
    step = 0
    lr = 0.0

    for epoch in tqdm(range(1, hyper.epochs + 1), disable=not progress, desc="train"):
        perm = shuffle_rng.permutation(len(train))
        for start in range(0, len(train), hyper.batch_size):
            batch = [train[i] for i in perm[start : start + hyper.batch_size]]
            loss, grad_q, grad_k = loss_and_grad(w_q, w_k, batch)
            if not math.isfinite(loss):
                raise NonFiniteLoss(f"Loss became {loss} at step {step + 1}")
            step += 1
            lr = _schedule(step, total, warmup, hyper.lr)
            for w, grad, m, v in ((w_q, grad_q, *moments[:2]), (w_k, grad_k, *moments[2:])):
                m *= hyper.beta1
                m += (1 - hyper.beta1) * grad
                v *= hyper.beta2
                v += (1 - hyper.beta2) * grad**2
                m_hat = m / (1 - hyper.beta1**step)
                v_hat = v / (1 - hyper.beta2**step)
                w -= lr * (m_hat / (np.sqrt(v_hat) + hyper.eps) + hyper.weight_decay * w)

        current = PredictorWeights(w_q.copy(), w_k.copy())
        stats = EpochStats(
            epoch,
            _mean_loss(current, train),
            _mean_loss(current, val),
            lr,
            _mean_abs_error(current, val),
        )
        report.epochs.append(stats)
        selected = stats.val_loss if val else stats.train_loss
        if not math.isfinite(selected):
            raise NonFiniteLoss(f"Loss became {selected} after epoch {epoch}")
        if selected < report.best_loss:
            report.best_loss = selected
            report.best_epoch = epoch
            best = current
        logger.info(
            "epoch %d train %.6g val %s lr %.3g",
            epoch,
            stats.train_loss,
            "-" if stats.val_loss is None else f"{stats.val_loss:.6g}",
            lr,
        )

    return best.with_merged(), report


def save_checkpoint(weights: PredictorWeights, cfg: FeatureConfig, path):
    if weights.d != cfg.d:
        raise DimensionMismatch(f"Weights are {weights.d}-dimensional, config says {cfg.d}")
    document = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "d": cfg.d,
        "vocab_size": cfg.vocab_size,
        "length": cfg.length,
        "flags": {
            "marginal": cfg.marginal,
            "position": cfg.position,
            "revealed": cfg.revealed,
        },
        "w_q": weights.w_q.tolist(),
        "w_k": weights.w_k.tolist(),
    }
    if weights.merged is not None:
        document["merged"] = weights.merged.tolist()
    with open(path, "w") as f:
        json.dump(document, f)


def load_checkpoint(
    path, expected: FeatureConfig | None = None
) -> tuple[PredictorWeights, FeatureConfig]:
    """Load weights and feature layout; the merged matrix is rebuilt if absent."""
    with open(path) as f:
        document = json.load(f)
    version = document.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise FormatVersionMismatch(
            f"Checkpoint format {version}, expected {CHECKPOINT_FORMAT_VERSION}"
        )
    cfg = FeatureConfig(document["vocab_size"], document["length"], **document["flags"])
    d = int(document["d"])
    if cfg.d != d:
        raise DimensionMismatch(f"Header d={d} but feature flags give d={cfg.d}")
    if expected is not None and expected.d != d:
        raise DimensionMismatch(f"Checkpoint d={d}, expected d={expected.d}")
    w_q = np.asarray(document["w_q"], dtype=np.float64)
    w_k = np.asarray(document["w_k"], dtype=np.float64)
    if w_q.shape != (d, d) or w_k.shape != (d, d):
        raise DimensionMismatch(f"Projection shapes {w_q.shape}, {w_k.shape} != ({d}, {d})")
    merged = document.get("merged")
    weights = PredictorWeights(w_q, w_k, None if merged is None else np.asarray(merged))
    return (weights if weights.merged is not None else weights.with_merged()), cfg
