"""Single-modality LSTM cell with full backpropagation through time.

The forward pass runs a batch of equal-length sequences, shape ``(B, T, d_x)``;
an unbatched ``(T, d_x)`` sequence is accepted everywhere and treated as
``B = 1``. Gate matrices are kept as separate named arrays so that the
multimodal model can share some of them across modalities by reference.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .numeric import ShapeError, affine, argmax_first, sigmoid, softmax

GATES = ("g", "i", "f", "o")
X_NAMES = tuple(f"W_x{g}" for g in GATES)
H_NAMES = tuple(f"W_h{g}" for g in GATES)
B_NAMES = tuple(f"b_{g}" for g in GATES)
PARAM_NAMES = X_NAMES + H_NAMES + B_NAMES + ("W_y",)

FORGET_BIAS_INIT = 1.0


@dataclass
class LstmParams:
    W_xg: np.ndarray
    W_xi: np.ndarray
    W_xf: np.ndarray
    W_xo: np.ndarray
    W_hg: np.ndarray
    W_hi: np.ndarray
    W_hf: np.ndarray
    W_ho: np.ndarray
    b_g: np.ndarray
    b_i: np.ndarray
    b_f: np.ndarray
    b_o: np.ndarray
    W_y: np.ndarray

    def __post_init__(self):
        d_h, d_x = self.W_xg.shape
        expected = {n: (d_h, d_x) for n in X_NAMES}
        expected.update({n: (d_h, d_h) for n in H_NAMES})
        expected.update({n: (d_h,) for n in B_NAMES})
        expected["W_y"] = (self.W_y.shape[0], d_h)
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ShapeError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def d_x(self) -> int:
        return self.W_xg.shape[1]

    @property
    def d_h(self) -> int:
        return self.W_xg.shape[0]

    @property
    def K(self) -> int:
        return self.W_y.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        """Name -> array mapping. The arrays are the live parameter objects."""
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def count(self) -> int:
        return sum(a.size for a in self.arrays().values())

    @classmethod
    def zeros(cls, d_x: int, d_h: int, K: int) -> "LstmParams":
        return cls(**{n: np.zeros(s) for n, s in param_shapes(d_x, d_h, K).items()})

    @classmethod
    def init(cls, d_x: int, d_h: int, K: int, rng: np.random.Generator) -> "LstmParams":
        """Uniform(-1/sqrt(d_h), 1/sqrt(d_h)) weights, zero biases, forget bias +1."""
        if min(d_x, d_h, K) < 1:
            raise ValueError(f"dimensions must be positive, got d_x={d_x} d_h={d_h} K={K}")
        return cls(**init_arrays(param_shapes(d_x, d_h, K), d_h, rng))


def param_shapes(d_x: int, d_h: int, K: int) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {n: (d_h, d_x) for n in X_NAMES}
    shapes.update({n: (d_h, d_h) for n in H_NAMES})
    shapes.update({n: (d_h,) for n in B_NAMES})
    shapes["W_y"] = (K, d_h)
    return shapes


def init_arrays(shapes: dict[str, tuple[int, ...]], d_h: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Initialise in the order of ``shapes`` so the draw sequence is fixed."""
    r = 1.0 / np.sqrt(d_h)
    out = {}
    for name, shape in shapes.items():
        base = name.split("/")[0]
        if base.startswith("b_"):
            out[name] = np.full(shape, FORGET_BIAS_INIT if base == "b_f" else 0.0)
        else:
            out[name] = rng.uniform(-r, r, size=shape)
    return out


def param_count(d_x: int, d_h: int, K: int) -> int:
    return 4 * d_h * (d_x + d_h + 1) + K * d_h


@dataclass
class LstmTrace:
    """Cached activations, each shaped ``(B, T, ·)``."""

    x: np.ndarray
    g: np.ndarray
    i: np.ndarray
    f: np.ndarray
    o: np.ndarray
    C: np.ndarray
    h: np.ndarray
    y: np.ndarray

    @property
    def T(self) -> int:
        return self.x.shape[1]


def _stack_x(p: LstmParams) -> tuple[np.ndarray, np.ndarray]:
    return np.concatenate([p.W_xg, p.W_xi, p.W_xf, p.W_xo]), np.concatenate([p.b_g, p.b_i, p.b_f, p.b_o])


def _stack_h(p: LstmParams) -> np.ndarray:
    return np.concatenate([p.W_hg, p.W_hi, p.W_hf, p.W_ho])


def _gates(a: np.ndarray, d_h: int):
    g = np.tanh(a[..., :d_h])
    ifo = sigmoid(a[..., d_h:])
    return g, ifo[..., :d_h], ifo[..., d_h:2 * d_h], ifo[..., 2 * d_h:]


def cell_step(p: LstmParams, x_t, h_prev, C_prev):
    """One memory-cell update. Returns ``(g, i, f, o, C, h)``."""
    x_t = np.asarray(x_t, dtype=np.float64)
    h_prev = np.asarray(h_prev, dtype=np.float64)
    C_prev = np.asarray(C_prev, dtype=np.float64)
    if h_prev.shape[-1] != p.d_h or C_prev.shape[-1] != p.d_h:
        raise ShapeError(f"state has shapes {h_prev.shape}/{C_prev.shape}, expected d_h={p.d_h}")
    Wx, bx = _stack_x(p)
    a = affine(Wx, x_t, bx) + h_prev @ _stack_h(p).T
    g, i, f, o = _gates(a, p.d_h)
    C = f * C_prev + i * g
    h = o * np.tanh(C)
    return g, i, f, o, C, h


def as_batch(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3:
        raise ShapeError(f"expected (T, d) or (B, T, d) input, got shape {X.shape}")
    if X.shape[1] == 0:
        raise ValueError("sequence must have at least one timestep")
    return X


def forward(p: LstmParams, X) -> LstmTrace:
    """Run the cell over ``X`` from a zero state and record every activation."""
    X = as_batch(X)
    B, T, d_x = X.shape
    if d_x != p.d_x:
        raise ShapeError(f"input has d={d_x} but the cell expects d_x={p.d_x}")
    d_h = p.d_h
    Wx, bx = _stack_x(p)
    Wh = _stack_h(p)
    ax = X @ Wx.T + bx
    acts = {k: np.empty((B, T, d_h)) for k in ("g", "i", "f", "o", "C", "h")}
    h = np.zeros((B, d_h))
    C = np.zeros((B, d_h))
    for t in range(T):
        a = ax[:, t] + h @ Wh.T
        g, i, f, o = _gates(a, d_h)
        C = f * C + i * g
        h = o * np.tanh(C)
        for k, v in (("g", g), ("i", i), ("f", f), ("o", o), ("C", C), ("h", h)):
            acts[k][:, t] = v
    y = softmax(acts["h"] @ p.W_y.T)
    return LstmTrace(x=X, y=y, **acts)


def _onehot(labels: np.ndarray, K: int) -> np.ndarray:
    return np.eye(K)[labels]


def _check_supervision(trace: LstmTrace, labels, loss_weights):
    B, T = trace.x.shape[:2]
    labels = np.asarray(labels)
    weights = np.asarray(loss_weights, dtype=np.float64)
    if labels.ndim == 1:
        labels = labels[None]
    if weights.ndim == 1:
        weights = weights[None]
    if labels.shape != (B, T) or weights.shape != (B, T):
        raise ShapeError(f"labels {labels.shape} / weights {weights.shape} do not match (B, T) = {(B, T)}")
    K = trace.y.shape[-1]
    if labels.min() < 0 or labels.max() >= K:
        raise ValueError(f"labels must lie in [0, {K})")
    return labels.astype(np.int64), weights


def loss(trace: LstmTrace, labels, loss_weights) -> float:
    """``sum_{b,t} w[b,t] * CE(y[b,t], labels[b,t])``."""
    labels, weights = _check_supervision(trace, labels, loss_weights)
    p = np.take_along_axis(trace.y, labels[..., None], axis=-1)[..., 0]
    return float(np.sum(weights * -np.log(np.maximum(p, 1e-12))))


def backward(p: LstmParams, trace: LstmTrace, labels, loss_weights) -> dict[str, np.ndarray]:
    """Gradient of :func:`loss` with respect to every parameter array."""
    labels, weights = _check_supervision(trace, labels, loss_weights)
    B, T, _ = trace.x.shape
    d_h = p.d_h
    dz = weights[..., None] * (trace.y - _onehot(labels, p.K))
    grads = {"W_y": np.einsum("btk,bth->kh", dz, trace.h)}
    dh_out = dz @ p.W_y
    Wh = _stack_h(p)
    da_all = np.empty((B, T, 4 * d_h))
    dh_next = np.zeros((B, d_h))
    dC_next = np.zeros((B, d_h))
    dWh = np.zeros_like(Wh)
    zeros = np.zeros((B, d_h))
    for t in range(T - 1, -1, -1):
        g, i, f, o, C = (trace.g[:, t], trace.i[:, t], trace.f[:, t], trace.o[:, t], trace.C[:, t])
        C_prev = trace.C[:, t - 1] if t > 0 else zeros
        h_prev = trace.h[:, t - 1] if t > 0 else zeros
        dh = dh_out[:, t] + dh_next
        tC = np.tanh(C)
        dC = dC_next + dh * o * (1.0 - tC * tC)
        da = da_all[:, t]
        da[:, :d_h] = dC * i * (1.0 - g * g)
        da[:, d_h:2 * d_h] = dC * g * i * (1.0 - i)
        da[:, 2 * d_h:3 * d_h] = dC * C_prev * f * (1.0 - f)
        da[:, 3 * d_h:] = dh * tC * o * (1.0 - o)
        dWh += da.T @ h_prev
        dh_next = da @ Wh
        dC_next = dC * f
    dWx = np.einsum("bta,btd->ad", da_all, trace.x)
    db = da_all.sum(axis=(0, 1))
    for k, gate in enumerate(GATES):
        rows = slice(k * d_h, (k + 1) * d_h)
        grads[f"W_x{gate}"] = dWx[rows]
        grads[f"W_h{gate}"] = dWh[rows]
        grads[f"b_{gate}"] = db[rows]
    return {n: grads[n] for n in PARAM_NAMES}


def uniform_weights(B: int, T: int, scale: float = 1.0) -> np.ndarray:
    """Identical weight on every timestep, summing to ``scale`` per sequence."""
    return np.full((B, T), scale / T)


def predict_last(p: LstmParams, X) -> np.ndarray | int:
    """Class of the last output ``y_T``; returns an int for an unbatched input."""
    X_arr = np.asarray(X)
    pred = argmax_first(forward(p, X_arr).y[:, -1])
    return int(pred[0]) if X_arr.ndim == 2 else pred


@dataclass
class LinearSoftmax:
    """Per-frame classifier ``softmax(W x + b)``."""

    W: np.ndarray
    b: np.ndarray

    def proba(self, X) -> np.ndarray:
        return softmax(affine(self.W, X, self.b))


def frame_average_baseline(frames, clf: LinearSoftmax) -> np.ndarray | int:
    """Average per-frame class probabilities over time, then take the argmax."""
    X = np.asarray(frames, dtype=np.float64)
    if X.shape[-1] != clf.W.shape[1]:
        raise ShapeError(f"frames have d={X.shape[-1]} but the classifier expects {clf.W.shape[1]}")
    mean = clf.proba(X).mean(axis=-2)
    pred = argmax_first(mean)
    return int(pred) if X.ndim == 2 else pred


def fit_linear_softmax(frames: np.ndarray, labels: np.ndarray, max_iter: int = 500) -> LinearSoftmax:
    """Multinomial logistic regression on individual frames."""
    from sklearn.linear_model import LogisticRegression

    clf = LogisticRegression(max_iter=max_iter).fit(frames, labels)
    return LinearSoftmax(clf.coef_.astype(np.float64), clf.intercept_.astype(np.float64))
