"""Distractor rejection, ROC sweeps, window voting and scene scoring.

A two-stream sample is rejected when its per-timestep label proposals
disagree on more than ``m`` steps; otherwise it is labelled by averaging the
per-timestep outputs of both streams.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import asdict, dataclass

import numpy as np

from . import multimodal as mm
from .dataset import Scene, TestSet
from .numeric import ShapeError, argmax_first, make_rng

REJECTED = -1
FAR_MODES = ("reject-or-mislabel", "reject-only")
AVERAGE_MODES = ("prob", "onehot")


def disagreement_count(a, b) -> int | np.ndarray:
    """Number of timesteps where two proposal streams differ (last axis)."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"proposal streams have shapes {a.shape} and {b.shape}")
    out = np.sum(a != b, axis=-1)
    return int(out) if out.ndim == 0 else out


@dataclass
class StreamOutputs:
    """What the rejection rule needs from a model: per-timestep probabilities
    of each stream, shape ``(n, B, T, K)``."""

    probs: np.ndarray

    @property
    def T(self) -> int:
        return self.probs.shape[2]

    def proposals(self) -> np.ndarray:
        return argmax_first(self.probs)

    def disagreements(self) -> np.ndarray:
        p = self.proposals()
        if p.shape[0] != 2:
            raise ShapeError(f"rejection needs two streams, got {p.shape[0]}")
        return disagreement_count(p[0], p[1])

    def labels(self, average: str = "prob") -> np.ndarray:
        """Label from the mean over all ``n * T`` per-timestep outputs."""
        if average == "prob":
            return argmax_first(self.probs.mean(axis=(0, 2)))
        if average == "onehot":
            K = self.probs.shape[-1]
            return argmax_first(np.eye(K)[self.proposals()].mean(axis=(0, 2)))
        raise ValueError(f"unknown averaging mode {average!r}")


def stream_outputs(model: mm.MultimodalParams, inputs) -> StreamOutputs:
    return StreamOutputs(np.stack([tr.y for tr in mm.mm_forward(model, inputs)]))


def decide(outputs: StreamOutputs, m: int, average: str = "prob") -> np.ndarray:
    """Label per sample, or ``REJECTED`` where disagreements exceed ``m``."""
    if not 0 <= m <= outputs.T:
        raise ValueError(f"threshold m={m} outside [0, {outputs.T}]")
    return np.where(outputs.disagreements() > m, REJECTED, outputs.labels(average))


def classify_with_rejection(model: mm.MultimodalParams, inputs, m: int, average: str = "prob"):
    """Decision for one unbatched sample (int) or a batch (array)."""
    unbatched = np.asarray(inputs[0]).ndim == 2
    out = decide(stream_outputs(model, inputs), m, average)
    return int(out[0]) if unbatched else out


@dataclass
class RocPoint:
    m: int
    false_alarm_rate: float
    accuracy: float
    genuine_rejection_rate: float
    distractor_acceptance_rate: float

    def to_dict(self) -> dict:
        return asdict(self)


def roc_from_outputs(outputs: StreamOutputs, labels, is_distractor, m_values,
                     far_mode: str = "reject-or-mislabel", average: str = "prob") -> list[RocPoint]:
    """Sweep the threshold over precomputed model outputs.

    False alarms are genuine samples that are rejected (``reject-only``) or
    rejected or mislabelled (``reject-or-mislabel``). Accuracy counts genuine
    samples labelled correctly and distractors rejected, over all samples.
    """
    if far_mode not in FAR_MODES:
        raise ValueError(f"unknown false-alarm mode {far_mode!r}")
    labels = np.asarray(labels)
    dis = np.asarray(is_distractor, dtype=bool)
    if len(labels) == 0:
        raise ValueError("empty test set")
    if dis.all() or not dis.any():
        raise ValueError("test set needs both genuine and distractor samples")
    d = outputs.disagreements()
    pred = outputs.labels(average)
    gen = ~dis
    points = []
    for m in m_values:
        if not 0 <= m <= outputs.T:
            raise ValueError(f"threshold m={m} outside [0, {outputs.T}]")
        accepted = d <= m
        g_rej = float(np.mean(~accepted[gen]))
        g_ok = accepted[gen] & (pred[gen] == labels[gen])
        far = g_rej if far_mode == "reject-only" else float(np.mean(~g_ok))
        acc = (np.sum(g_ok) + np.sum(~accepted[dis])) / len(labels)
        points.append(RocPoint(int(m), far, float(acc), g_rej, float(np.mean(accepted[dis]))))
    return points


def roc_sweep(model: mm.MultimodalParams, testset: TestSet, m_values=None,
              far_mode: str = "reject-or-mislabel", average: str = "prob") -> list[RocPoint]:
    outputs = stream_outputs(model, testset.inputs)
    if m_values is None:
        m_values = range(outputs.T + 1)
    return roc_from_outputs(outputs, testset.labels, testset.is_distractor, m_values, far_mode, average)


def roc_area(points: list[RocPoint]) -> float:
    """Area under ``A(x) = max{accuracy : false_alarm_rate <= x}`` for x in [0, 1].

    ``A`` is the best accuracy reachable within a false-alarm budget, so the
    area is defined even when models cover different false-alarm ranges.
    """
    pts = sorted((p.false_alarm_rate, p.accuracy) for p in points)
    area, best = 0.0, 0.0
    xs = [x for x, _ in pts] + [1.0]
    for (x, acc), x_next in zip(pts, xs[1:]):
        best = max(best, acc)
        area += best * (x_next - x)
    return area


# ---------------------------------------------------------------- voting

SMALL_WINDOW = 0.5
STRIDE = 0.25


def windows_in(span: float, size: float = SMALL_WINDOW, stride: float = STRIDE) -> int:
    """Number of ``size``-second windows at ``stride`` that fit in ``span`` seconds."""
    if span < size:
        raise ValueError(f"span {span}s is shorter than one {size}s window")
    return int(round((span - size) / stride)) + 1


def window_vote(decisions) -> int:
    """Majority label among non-rejected decisions.

    Rejected wins only with a strict majority of all windows; label ties go
    to the smallest class index.
    """
    decisions = [int(d) for d in decisions]
    if not decisions:
        raise ValueError("no window decisions to vote on")
    n_rej = decisions.count(REJECTED)
    if 2 * n_rej > len(decisions):
        return REJECTED
    counts = Counter(d for d in decisions if d != REJECTED)
    if not counts:
        return REJECTED
    top = max(counts.values())
    return min(k for k, c in counts.items() if c == top)


# ---------------------------------------------------------------- scenes

@dataclass
class SceneReport:
    accuracy: float
    n_scenes: int
    trivial: int
    vote_window: float


def scene_decisions(model: mm.MultimodalParams, scenes: list[Scene], m: int, n_windows: int,
                    average: str = "prob") -> list[list[int]]:
    """Voted decision per candidate of each scene, using the first ``n_windows``
    small windows."""
    faces, voices, owner = [], [], []
    for si, sc in enumerate(scenes):
        if len(sc.windows) < n_windows:
            raise ValueError(f"scene {si} has {len(sc.windows)} windows, need {n_windows}")
        if sc.windows[0].voice is None:
            continue
        for ci in range(len(sc.candidates)):
            for w in sc.windows[:n_windows]:
                faces.append(w.faces[ci])
                voices.append(w.voice)
                owner.append((si, ci))
    out: list[list[int]] = [[] for _ in scenes]
    if not faces:
        return out
    flat = decide(stream_outputs(model, [np.stack(faces), np.stack(voices)]), m, average)
    per: dict[tuple[int, int], list[int]] = {}
    for key, d in zip(owner, flat):
        per.setdefault(key, []).append(int(d))
    for si, sc in enumerate(scenes):
        out[si] = [window_vote(per[(si, ci)]) for ci in range(len(sc.candidates))] if (si, 0) in per else []
    return out


def scene_success(scene: Scene, decisions: list[int]) -> bool:
    """Speaker present: the speaker's track gets the speaker's label and every
    other track is rejected. Speaker absent: every track is rejected."""
    for k, d in zip(scene.candidates, decisions):
        if scene.speaker is not None and k == scene.speaker:
            if d != scene.speaker:
                return False
        elif d != REJECTED:
            return False
    return True


def scene_accuracy(model: mm.MultimodalParams, scenes: list[Scene], m: int, vote_window: float = SMALL_WINDOW,
                   average: str = "prob") -> SceneReport:
    if not scenes:
        raise ValueError("no scenes to score")
    decisions = scene_decisions(model, scenes, m, windows_in(vote_window), average)
    trivial = sum(1 for sc in scenes if not sc.candidates or sc.windows[0].voice is None)
    ok = [scene_success(sc, d) if sc.candidates and sc.windows[0].voice is not None else True
          for sc, d in zip(scenes, decisions)]
    return SceneReport(float(np.mean(ok)), len(scenes), trivial, vote_window)


def shuffle_chance(scenes: list[Scene], decisions: list[list[int]], trials: int = 200, seed: int = 0) -> float:
    """Scene accuracy when the model's decisions are randomly reassigned to
    candidate slots across all scenes (keeps the decision mix, drops the
    link to the inputs)."""
    flat = [d for ds in decisions for d in ds]
    rng = make_rng(seed)
    scores = []
    for _ in range(trials):
        perm = list(rng.permutation(flat)) if flat else []
        ok, pos = [], 0
        for sc, ds in zip(scenes, decisions):
            ok.append(scene_success(sc, perm[pos:pos + len(ds)]))
            pos += len(ds)
        scores.append(np.mean(ok))
    return float(np.mean(scores))


TABLE_WINDOWS = (0.5, 1.0, 1.5, 2.0, 2.5, 3.0)


def vote_table(model: mm.MultimodalParams, scenes: list[Scene], m: int, windows=TABLE_WINDOWS,
               average: str = "prob") -> dict[float, float]:
    """Scene accuracy for each voting window size (seconds)."""
    return {w: scene_accuracy(model, scenes, m, w, average).accuracy for w in windows}
