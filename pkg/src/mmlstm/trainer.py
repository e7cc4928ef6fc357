"""Minibatch training, optimisers, gradient clipping and gradient checking."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint, lstm
from . import multimodal as mm
from .dataset import DataError, SequencePool, make_testset, pair_takes
from .lstm import LstmParams
from .multimodal import MultimodalParams, SharingVariant
from .numeric import ShapeError, argmax_first, make_rng

log = logging.getLogger(__name__)

VARIANTS = ("full", "half", "none", "single")


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    optimizer: str = "adam"
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip: float = 5.0
    seed: int = 0
    variant: str = "full"
    hidden: int = 16
    modality: int = 0
    eval_samples: int = 1000

    def validate(self) -> "TrainConfig":
        if self.epochs < 0 or self.batch_size < 1 or self.hidden < 1:
            raise ValueError("epochs must be >= 0, batch_size and hidden >= 1")
        if self.lr < 0 or self.clip <= 0:
            raise ValueError("lr must be >= 0 and clip > 0")
        if self.optimizer not in ("adam", "sgd-momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if not (0 <= self.momentum < 1 and 0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("momentum and beta parameters must lie in [0, 1)")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- model adapters

def arrays_of(model) -> dict[str, np.ndarray]:
    return checkpoint.model_arrays(model)


def init_model(cfg: TrainConfig, dims, K: int):
    rng = make_rng(cfg.seed)
    if cfg.variant == "single":
        return LstmParams.init(dims[cfg.modality], cfg.hidden, K, rng)
    return mm.build(cfg.variant, dims, cfg.hidden, K, rng)


def forward_all(model, inputs) -> list[lstm.LstmTrace]:
    if isinstance(model, LstmParams):
        if len(inputs) != 1:
            raise ShapeError(f"single-modal model takes one input stream, got {len(inputs)}")
        return [lstm.forward(model, inputs[0])]
    return mm.mm_forward(model, inputs)


def loss_value(model, inputs, labels, weights) -> float:
    return sum(lstm.loss(tr, labels, weights) for tr in forward_all(model, inputs))


def loss_and_grad(model, inputs, labels, weights):
    traces = forward_all(model, inputs)
    total = sum(lstm.loss(tr, labels, weights) for tr in traces)
    if isinstance(model, LstmParams):
        return total, lstm.backward(model, traces[0], labels, weights)
    return total, mm.mm_backward(model, traces, labels, weights)


def mean_weights(model, B: int, T: int) -> np.ndarray:
    """Weights giving the mean CE over batch, modalities and timesteps."""
    n = 1 if isinstance(model, LstmParams) else model.n
    return np.full((B, T), 1.0 / (B * n * T))


# ---------------------------------------------------------------- optimisation

def global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_global(grads: dict[str, np.ndarray], threshold: float) -> dict[str, np.ndarray]:
    """Rescale all gradients together so their joint L2 norm is at most ``threshold``."""
    if threshold <= 0:
        raise ValueError("clip threshold must be positive")
    norm = global_norm(grads)
    if norm <= threshold:
        return grads
    scale = threshold / norm
    return {k: g * scale for k, g in grads.items()}


class SGDMomentum:
    def __init__(self, lr: float, momentum: float = 0.9):
        self.lr, self.momentum = lr, momentum
        self.velocity: dict[str, np.ndarray] = {}

    def update(self, key: str, w: np.ndarray, g: np.ndarray) -> None:
        v = self.velocity.get(key)
        v = -self.lr * g if v is None else self.momentum * v - self.lr * g
        self.velocity[key] = v
        w += v


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def update(self, key: str, w: np.ndarray, g: np.ndarray) -> None:
        m = self.beta1 * self.m.get(key, 0.0) + (1 - self.beta1) * g
        v = self.beta2 * self.v.get(key, 0.0) + (1 - self.beta2) * g * g
        t = self.t.get(key, 0) + 1
        self.m[key], self.v[key], self.t[key] = m, v, t
        m_hat = m / (1 - self.beta1 ** t)
        v_hat = v / (1 - self.beta2 ** t)
        w -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    return SGDMomentum(cfg.lr, cfg.momentum)


def step(arrays: dict[str, np.ndarray], grads: dict[str, np.ndarray], optimizer) -> None:
    """Apply one in-place update. A shared array appears once in ``arrays``
    and so is updated exactly once."""
    if arrays.keys() != grads.keys():
        raise ShapeError(f"gradient keys {sorted(grads)} do not match parameters {sorted(arrays)}")
    for k, w in arrays.items():
        if grads[k].shape != w.shape:
            raise ShapeError(f"{k}: gradient shape {grads[k].shape} vs parameter {w.shape}")
    for k, w in arrays.items():
        optimizer.update(k, w, grads[k])


# ---------------------------------------------------------------- batching

def balanced_order(pool: SequencePool, rng: np.random.Generator) -> np.ndarray:
    """All takes, shuffled within identity and interleaved across identities
    so that every contiguous block holds near-equal identity counts."""
    takes, pos = [], []
    for k in rng.permutation(pool.identities):
        t = rng.permutation(pool.takes_of(k))
        takes.append(t)
        pos.append((np.arange(len(t)) + 0.5) / len(t))
    order = np.argsort(np.concatenate(pos), kind="stable")
    return np.concatenate(takes)[order]


@dataclass
class TrainResult:
    model: object
    history: list[dict] = field(default_factory=list)


def _check_dims(model, pool: SequencePool, cfg: TrainConfig) -> None:
    if isinstance(model, LstmParams):
        if not 0 <= cfg.modality < pool.n:
            raise DataError(f"modality index {cfg.modality} not in pool with {pool.n} modalities")
        if pool.dims[cfg.modality] != model.d_x:
            raise ShapeError(f"pool modality has d={pool.dims[cfg.modality]}, model expects {model.d_x}")
    elif pool.dims != model.d_xs:
        raise ShapeError(f"pool dims {pool.dims} do not match model dims {model.d_xs}")
    K = model.K
    if pool.identity.max() >= K:
        raise ShapeError(f"pool has identity {pool.identity.max()} but model has {K} classes")


def heldout_accuracy(model, pool: SequencePool, cfg: TrainConfig) -> float:
    """Single model: last-step accuracy. Multimodal: accuracy of the averaged
    per-timestep probabilities over genuine (whole-take) samples."""
    n = min(cfg.eval_samples, len(pool))
    idx = np.linspace(0, len(pool) - 1, n).round().astype(int)
    aligned = pool.aligned()
    labels = pool.identity[idx]
    if isinstance(model, LstmParams):
        pred = argmax_first(lstm.forward(model, aligned[cfg.modality][idx]).y[:, -1])
    else:
        traces = mm.mm_forward(model, [A[idx] for A in aligned])
        mean = np.mean([tr.y.mean(axis=1) for tr in traces], axis=0)
        pred = argmax_first(mean)
    return float(np.mean(pred == labels))


def train(model, train_pool: SequencePool, test_pool: SequencePool | None, cfg: TrainConfig,
          metrics_path=None, checkpoint_path=None, meta: dict | None = None) -> TrainResult:
    """Run ``cfg.epochs`` epochs of identity-balanced minibatch training in place."""
    cfg.validate()
    _check_dims(model, train_pool, cfg)
    if test_pool is not None:
        _check_dims(model, test_pool, cfg)
    single = isinstance(model, LstmParams)
    rng = make_rng(cfg.seed + 1)
    optimizer = make_optimizer(cfg)
    arrays = arrays_of(model)
    aligned = train_pool.aligned()
    T = train_pool.T
    result = TrainResult(model)
    metrics = open(metrics_path, "w") if metrics_path else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            order = balanced_order(train_pool, rng)
            total = 0.0
            for start in range(0, len(order), cfg.batch_size):
                anchor = order[start:start + cfg.batch_size]
                labels = np.repeat(train_pool.identity[anchor][:, None], T, axis=1)
                if single:
                    inputs = [aligned[cfg.modality][anchor]]
                else:
                    takes = pair_takes(train_pool, train_pool.identity[anchor], rng)
                    takes[0] = anchor
                    inputs = [aligned[s][takes[s]] for s in range(train_pool.n)]
                w = mean_weights(model, len(anchor), T)
                value, grads = loss_and_grad(model, inputs, labels, w)
                if not np.isfinite(value):
                    raise FloatingPointError(f"non-finite loss at epoch {epoch}")
                total += value * len(anchor)
                step(arrays, clip_global(grads, cfg.clip), optimizer)
            record = {"epoch": epoch, "loss": total / len(order)}
            if test_pool is not None:
                record["accuracy"] = heldout_accuracy(model, test_pool, cfg)
            result.history.append(record)
            log.info("epoch %d loss %.6f acc %s", epoch, record["loss"], record.get("accuracy"))
            if metrics:
                metrics.write(json.dumps(record) + "\n")
                metrics.flush()
    finally:
        if metrics:
            metrics.close()
    if checkpoint_path is not None:
        checkpoint.save(checkpoint_path, model, seed=cfg.seed, meta={"train": cfg.to_dict(), **(meta or {})})
    return result


# ---------------------------------------------------------------- gradient check

GRAD_FLOOR = 1e-5


@dataclass
class GradCheck:
    max_rel_error: float
    key: str
    index: tuple
    analytic: float
    numeric: float
    probed: int


def relative_error(a: float, n: float) -> float:
    """``|a - n| / max(|a|, |n|, GRAD_FLOOR)``.

    Below ``GRAD_FLOOR`` the comparison becomes absolute, since central
    differences carry ~1e-11 round-off regardless of the gradient's size.
    """
    return abs(a - n) / max(abs(a), abs(n), GRAD_FLOOR)


def grad_check(model, inputs, labels, eps: float = 1e-5, weights=None, analytic=None,
               max_full: int = 10_000, rng: np.random.Generator | None = None) -> GradCheck:
    """Compare the analytic gradient with central differences.

    Every entry is probed, or a random 5% subsample for models larger than
    ``max_full`` parameters. ``analytic`` overrides the backward pass (used to
    check that corrupted gradients are caught).
    """
    inputs = [lstm.as_batch(X) for X in inputs]
    B, T = inputs[0].shape[:2]
    labels = np.asarray(labels).reshape(B, T)
    weights = mean_weights(model, B, T) if weights is None else np.asarray(weights)
    if analytic is None:
        _, analytic = loss_and_grad(model, inputs, labels, weights)
    arrays = arrays_of(model)
    total = sum(a.size for a in arrays.values())
    rng = rng or make_rng(0)
    worst = GradCheck(0.0, "", (), 0.0, 0.0, 0)
    probed = 0
    for key, a in arrays.items():
        flat = a.reshape(-1)
        idx = range(flat.size)
        if total > max_full:
            idx = np.flatnonzero(rng.random(flat.size) < 0.05)
        for j in idx:
            old = flat[j]
            flat[j] = old + eps
            plus = loss_value(model, inputs, labels, weights)
            flat[j] = old - eps
            minus = loss_value(model, inputs, labels, weights)
            flat[j] = old
            num = (plus - minus) / (2 * eps)
            an = float(analytic[key].reshape(-1)[j])
            err = relative_error(an, num)
            probed += 1
            if err > worst.max_rel_error or not worst.key:
                worst = GradCheck(err, key, np.unravel_index(j, a.shape), an, num, 0)
    worst.index = tuple(int(i) for i in worst.index)
    worst.probed = probed
    return worst


def random_check_case(rng: np.random.Generator, variant: str, n: int = 2, max_dx: int = 6,
                      max_dh: int = 8, max_T: int = 5, max_K: int = 4, B: int = 2):
    """A random small model plus inputs and labels for gradient checking."""
    d_h = int(rng.integers(1, max_dh + 1))
    K = int(rng.integers(2, max_K + 1))
    T = int(rng.integers(1, max_T + 1))
    seed = int(rng.integers(2**31))
    if variant == "single":
        d_xs = (int(rng.integers(1, max_dx + 1)),)
        model = LstmParams.init(d_xs[0], d_h, K, make_rng(seed))
    else:
        d_xs = tuple(int(d) for d in rng.integers(1, max_dx + 1, size=n))
        model = mm.build(variant, d_xs, d_h, K, make_rng(seed))
    # push parameters away from the near-linear init regime
    for a in arrays_of(model).values():
        a += rng.normal(0, 0.5, a.shape)
    inputs = [rng.normal(size=(B, T, d)) for d in d_xs]
    labels = rng.integers(K, size=(B, T))
    return model, inputs, labels
