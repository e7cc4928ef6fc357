"""Multimodal LSTM with cross-modal weight sharing.

Each modality ``s`` keeps its own input weights ``W_x*^s``, biases ``b_*^s``
and memory line ``C^s``. What is shared depends on the variant:

* ``FULL``: one copy of ``W_h*`` and one ``W_y`` used by every modality.
* ``HALF``: one copy of ``W_h*``; a private ``W_y^s`` per modality.
* ``NONE``: nothing shared, i.e. ``n`` independent LSTMs.

Sharing is by reference. ``view(s)`` returns an :class:`LstmParams` whose
fields are the very arrays stored in ``arrays``, so an in-place update to a
shared matrix is seen by every modality.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import lstm
from .lstm import B_NAMES, H_NAMES, PARAM_NAMES, X_NAMES, LstmParams, LstmTrace
from .numeric import ShapeError, argmax_first


class SharingVariant(str, enum.Enum):
    FULL = "full"
    HALF = "half"
    NONE = "none"


def _key(name: str, s: int, variant: SharingVariant) -> str:
    variant = SharingVariant(variant)
    if name in X_NAMES or name in B_NAMES:
        return f"{name}/{s}"
    if name in H_NAMES:
        return name if variant is not SharingVariant.NONE else f"{name}/{s}"
    # W_y
    return name if variant is SharingVariant.FULL else f"{name}/{s}"


def mm_param_shapes(variant: SharingVariant, d_xs, d_h: int, K: int) -> dict[str, tuple[int, ...]]:
    """Ordered ``key -> shape``; shared arrays appear once, at first use."""
    variant = SharingVariant(variant)
    shapes: dict[str, tuple[int, ...]] = {}
    for s, d_x in enumerate(d_xs):
        for name, shape in lstm.param_shapes(d_x, d_h, K).items():
            shapes.setdefault(_key(name, s, variant), shape)
    return shapes


@dataclass
class MultimodalParams:
    variant: SharingVariant
    d_xs: tuple[int, ...]
    d_h: int
    K: int
    arrays: dict[str, np.ndarray]

    def __post_init__(self):
        self.variant = SharingVariant(self.variant)
        self.d_xs = tuple(int(d) for d in self.d_xs)
        expected = mm_param_shapes(self.variant, self.d_xs, self.d_h, self.K)
        if list(expected) != list(self.arrays):
            raise ShapeError(f"parameter keys {list(self.arrays)} do not match variant {self.variant.value}")
        for k, shape in expected.items():
            if self.arrays[k].shape != shape:
                raise ShapeError(f"{k} has shape {self.arrays[k].shape}, expected {shape}")

    @property
    def n(self) -> int:
        return len(self.d_xs)

    def key(self, name: str, s: int) -> str:
        return _key(name, s, self.variant)

    def view(self, s: int) -> LstmParams:
        return LstmParams(**{name: self.arrays[self.key(name, s)] for name in PARAM_NAMES})

    def count(self) -> int:
        return sum(a.size for a in self.arrays.values())


def build(variant, d_xs, d_h: int, K: int, rng: np.random.Generator) -> MultimodalParams:
    variant = SharingVariant(variant)
    d_xs = tuple(d_xs)
    if len(d_xs) == 0:
        raise ValueError("need at least one modality")
    if min(d_xs + (d_h, K)) < 1:
        raise ValueError(f"dimensions must be positive, got d_xs={d_xs} d_h={d_h} K={K}")
    shapes = mm_param_shapes(variant, d_xs, d_h, K)
    return MultimodalParams(variant, d_xs, d_h, K, lstm.init_arrays(shapes, d_h, rng))


def expected_count(variant, d_xs, d_h: int, K: int) -> int:
    """Closed-form parameter count for a variant."""
    variant = SharingVariant(variant)
    n = len(d_xs)
    private = sum(4 * d_h * d_x + 4 * d_h for d_x in d_xs)
    n_h = 1 if variant is not SharingVariant.NONE else n
    n_y = 1 if variant is SharingVariant.FULL else n
    return private + n_h * 4 * d_h * d_h + n_y * K * d_h


def _inputs(p: MultimodalParams, Xs) -> list[np.ndarray]:
    if len(Xs) != p.n:
        raise ShapeError(f"model has {p.n} modalities but got {len(Xs)} input streams")
    Xs = [lstm.as_batch(X) for X in Xs]
    if len({X.shape[:2] for X in Xs}) != 1:
        raise ShapeError(f"streams must share (B, T); got {[X.shape[:2] for X in Xs]}")
    return Xs


def mm_forward(p: MultimodalParams, Xs) -> list[LstmTrace]:
    """One trace per modality; memory lines never mix across modalities."""
    return [lstm.forward(p.view(s), X) for s, X in enumerate(_inputs(p, Xs))]


def default_weights(p: MultimodalParams, B: int, T: int) -> np.ndarray:
    """Equal weight ``1/(n T)`` on every modality and timestep of a sequence."""
    return lstm.uniform_weights(B, T, 1.0 / p.n)


def mm_loss(traces: list[LstmTrace], labels, loss_weights) -> float:
    return sum(lstm.loss(tr, labels, loss_weights) for tr in traces)


def mm_backward(p: MultimodalParams, traces: list[LstmTrace], labels, loss_weights) -> dict[str, np.ndarray]:
    """Accumulate every modality's gradient into the arrays it used.

    The same label stream and weights supervise all modalities. Shared keys
    collect the sum over modalities.
    """
    if len(traces) != p.n:
        raise ShapeError(f"expected {p.n} traces, got {len(traces)}")
    grads: dict[str, np.ndarray] = {}
    for s, tr in enumerate(traces):
        for name, g in lstm.backward(p.view(s), tr, labels, loss_weights).items():
            k = p.key(name, s)
            grads[k] = g if k not in grads else grads[k] + g
    return {k: grads[k] for k in p.arrays}


def mm_predict(p: MultimodalParams, Xs) -> np.ndarray:
    """Per-timestep label proposals, shape ``(n, B, T)`` (``(n, T)`` if unbatched)."""
    unbatched = np.asarray(Xs[0]).ndim == 2
    props = np.stack([argmax_first(tr.y) for tr in mm_forward(p, Xs)])
    return props[:, 0] if unbatched else props
