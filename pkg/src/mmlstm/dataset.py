"""Sequence containers, feature files, pairing and the synthetic speaker task."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .numeric import make_rng

HEADER_MAGIC = "MMSEQ"
HEADER_VERSION = "v1"
POOL_FORMAT = "MMPOOL v1"


class DataError(ValueError):
    """Malformed or inconsistent data."""


@dataclass
class FeatureSequence:
    modality: str
    frames: np.ndarray
    identity: int

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise DataError(f"frames must be (T >= 1, d), got shape {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise DataError("frames contain non-finite values")

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def d(self) -> int:
        return self.frames.shape[1]


@dataclass
class MultimodalSample:
    sequences: list[FeatureSequence]
    label: int
    is_distractor: bool = False

    def __post_init__(self):
        if len({s.T for s in self.sequences}) != 1:
            raise DataError(f"modalities have unequal lengths {[s.T for s in self.sequences]}")
        ids = {s.identity for s in self.sequences}
        if self.is_distractor and len(ids) < 2:
            raise DataError("a distractor must mix source identities")

    @property
    def inputs(self) -> list[np.ndarray]:
        return [s.frames for s in self.sequences]


# ---------------------------------------------------------------- resampling

def duplicate_index(T: int, T_target: int) -> np.ndarray:
    """Source frame for each output frame: ``floor(j * T / T_target)``."""
    if T < 1 or T_target < T:
        raise DataError(f"cannot stretch {T} frames to {T_target}")
    return (np.arange(T_target) * T) // T_target


def duplicate_evenly(seq: FeatureSequence, T_target: int) -> FeatureSequence:
    """Stretch ``seq`` to ``T_target`` frames by evenly repeating frames."""
    idx = duplicate_index(seq.T, T_target)
    return FeatureSequence(seq.modality, seq.frames[idx], seq.identity)


# ---------------------------------------------------------------- pools

@dataclass
class SequencePool:
    """Sequences of several modalities, stored as aligned "takes".

    Take ``j`` holds one sequence per modality (``frames[s][j]``) recorded
    together; all of them carry ``identity[j]``. Runtime pairing may combine
    modalities from different takes.
    """

    modalities: tuple[str, ...]
    frames: list[np.ndarray]
    identity: np.ndarray

    def __post_init__(self):
        self.modalities = tuple(self.modalities)
        self.identity = np.asarray(self.identity, dtype=np.int64)
        if len(self.frames) != len(self.modalities):
            raise DataError("one frame array per modality is required")
        for m, F in zip(self.modalities, self.frames):
            if F.ndim != 3 or F.shape[0] != len(self.identity):
                raise DataError(f"modality {m}: frames {F.shape} do not match {len(self.identity)} takes")
        self._by_id = {int(k): np.flatnonzero(self.identity == k) for k in np.unique(self.identity)}

    def __len__(self) -> int:
        return len(self.identity)

    @property
    def n(self) -> int:
        return len(self.modalities)

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(F.shape[2] for F in self.frames)

    @property
    def lengths(self) -> tuple[int, ...]:
        return tuple(F.shape[1] for F in self.frames)

    @property
    def T(self) -> int:
        """Common length after even duplication."""
        return max(self.lengths)

    @property
    def identities(self) -> list[int]:
        return sorted(self._by_id)

    def takes_of(self, identity: int) -> np.ndarray:
        return self._by_id.get(int(identity), np.empty(0, dtype=np.int64))

    def aligned(self) -> list[np.ndarray]:
        """Frames of each modality stretched to the common length ``T``."""
        T = self.T
        return [F if F.shape[1] == T else F[:, duplicate_index(F.shape[1], T)] for F in self.frames]

    def sequence(self, s: int, j: int) -> FeatureSequence:
        return FeatureSequence(self.modalities[s], self.frames[s][j], int(self.identity[j]))

    def sample(self, takes, is_distractor: bool = False, label: int | None = None) -> MultimodalSample:
        """Assemble a sample from one take index per modality, aligned to ``T``."""
        seqs = [duplicate_evenly(self.sequence(s, j), self.T) for s, j in enumerate(takes)]
        label = seqs[-1].identity if label is None else label
        return MultimodalSample(seqs, label, is_distractor)


def pair_takes(pool: SequencePool, identities, rng: np.random.Generator) -> np.ndarray:
    """For each identity, draw one take per modality independently. Shape ``(n, N)``."""
    identities = np.asarray(identities)
    out = np.empty((pool.n, len(identities)), dtype=np.int64)
    for k in np.unique(identities):
        cand = pool.takes_of(k)
        if len(cand) == 0:
            raise DataError(f"no sequences of identity {k} in pool")
        rows = np.flatnonzero(identities == k)
        for s in range(pool.n):
            out[s, rows] = cand[rng.integers(len(cand), size=len(rows))]
    return out


def pair_runtime(pool: SequencePool, identity: int, rng: np.random.Generator) -> MultimodalSample:
    """Genuine sample: each modality from a uniformly drawn take of ``identity``."""
    takes = pair_takes(pool, [identity], rng)[:, 0]
    return pool.sample(takes, label=int(identity))


def distractor_takes(pool: SequencePool, count: int, rng: np.random.Generator) -> np.ndarray:
    """``(2, count)`` take indices (face, voice) with differing identities.

    Uniform over all cross-identity take pairs, by rejection sampling.
    """
    if len(pool.identities) < 2:
        raise DataError("distractors need at least two identities")
    N = len(pool)
    out = np.empty((2, 0), dtype=np.int64)
    while out.shape[1] < count:
        a = rng.integers(N, size=count)
        b = rng.integers(N, size=count)
        ok = pool.identity[a] != pool.identity[b]
        out = np.concatenate([out, np.stack([a[ok], b[ok]])], axis=1)
    return out[:, :count]


def make_distractor(pool: SequencePool, rng: np.random.Generator) -> MultimodalSample:
    """Ill-paired sample: face of one identity, voice of another; labelled by the voice."""
    if pool.n != 2:
        raise DataError("distractors are defined for two modalities")
    a, b = distractor_takes(pool, 1, rng)[:, 0]
    return pool.sample([a, b], is_distractor=True, label=int(pool.identity[b]))


@dataclass
class TestSet:
    """Pre-generated aligned evaluation batch."""

    inputs: list[np.ndarray]
    labels: np.ndarray
    is_distractor: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


def make_testset(pool: SequencePool, n_genuine: int, n_distractor: int, rng: np.random.Generator) -> TestSet:
    """Genuine samples are whole takes (modalities recorded together); distractors
    combine takes of different identities. Labels are the voice (last modality) identity."""
    aligned = pool.aligned()
    genuine = rng.integers(len(pool), size=n_genuine)
    face, voice = distractor_takes(pool, n_distractor, rng) if n_distractor else (np.empty(0, int),) * 2
    inputs = [
        np.concatenate([aligned[0][genuine], aligned[0][face]]),
        np.concatenate([aligned[1][genuine], aligned[1][voice]]),
    ]
    labels = np.concatenate([pool.identity[genuine], pool.identity[voice]])
    flags = np.concatenate([np.zeros(n_genuine, bool), np.ones(n_distractor, bool)])
    return TestSet(inputs, labels, flags)


# ---------------------------------------------------------------- synthetic task

@dataclass
class SynthConfig:
    K: int = 5
    modalities: tuple[str, ...] = ("face", "voice")
    dims: tuple[int, ...] = (16, 8)
    lengths: tuple[int, ...] = (20, 20)
    noise: float | tuple[float, ...] = 0.6
    coupling: float = 1.0
    degrade: float = 0.15
    walk_var: float = 0.1
    n_train: int = 2000
    n_test: int = 2000
    seed: int = 0

    def __post_init__(self):
        self.modalities = tuple(self.modalities)
        self.dims = tuple(int(d) for d in self.dims)
        self.lengths = tuple(int(t) for t in self.lengths)
        if isinstance(self.noise, (list, tuple)):
            self.noise = tuple(float(v) for v in self.noise)

    def noise_of(self, s: int) -> float:
        return self.noise[s] if isinstance(self.noise, tuple) else self.noise

    def validate(self) -> "SynthConfig":
        if self.K < 2:
            raise DataError(f"need at least 2 identities, got K={self.K}")
        if not (len(self.modalities) == len(self.dims) == len(self.lengths) >= 1):
            raise DataError("modalities, dims and lengths must have equal, non-zero length")
        if min(self.dims) < 1 or min(self.lengths) < 1:
            raise DataError("dims and lengths must be positive")
        if not 0.0 <= self.degrade <= 1.0:
            raise DataError(f"degrade must be a probability, got {self.degrade}")
        if isinstance(self.noise, tuple) and len(self.noise) != len(self.dims):
            raise DataError("per-modality noise needs one value per modality")
        if min(self.noise_of(s) for s in range(len(self.dims))) < 0 or self.walk_var < 0:
            raise DataError("noise and walk_var must be non-negative")
        if self.n_train < 1 or self.n_test < 1:
            raise DataError("n_train and n_test must be positive")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def prototypes(cfg: SynthConfig) -> list[np.ndarray]:
    """Per-modality ``(K, d)`` identity prototypes, drawn N(0, I)."""
    rng = make_rng(cfg.seed)
    return [rng.standard_normal((cfg.K, d)) for d in cfg.dims]


def latent_walk(n: int, T: int, var: float, rng: np.random.Generator) -> np.ndarray:
    """``(n, T)`` random walks starting at 0 with N(0, var) increments."""
    steps = rng.normal(0.0, np.sqrt(var), size=(n, T))
    steps[:, 0] = 0.0
    return np.cumsum(steps, axis=1)


def render(cfg: SynthConfig, protos, s: int, identity, z: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Frames of modality ``s`` for the given identities and latent walks.

    ``z`` lives on the longest timeline; shorter modalities read it at their
    own (evenly spaced) frame times.
    """
    T_s, T = cfg.lengths[s], z.shape[1]
    zt = z[:, (np.arange(T_s) * T) // T_s]
    mu = protos[s][np.asarray(identity)]
    X = mu[:, None, :] * (1.0 + cfg.coupling * zt)[..., None]
    X = X + cfg.noise_of(s) * rng.standard_normal(X.shape)
    bad = rng.random(X.shape[:2]) < cfg.degrade
    X[bad] = rng.standard_normal((int(bad.sum()), X.shape[2]))
    return X


def _generate(cfg: SynthConfig, protos, per_class: int, rng: np.random.Generator) -> SequencePool:
    identity = np.repeat(np.arange(cfg.K), per_class)
    z = latent_walk(len(identity), max(cfg.lengths), cfg.walk_var, rng)
    frames = [render(cfg, protos, s, identity, z, rng) for s in range(len(cfg.dims))]
    return SequencePool(cfg.modalities, frames, identity)


def synth_generate(cfg: SynthConfig) -> tuple[SequencePool, SequencePool]:
    """Train and test pools sharing prototypes but with disjoint draws."""
    cfg.validate()
    protos = prototypes(cfg)
    train_rng, test_rng = (make_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(2))
    return _generate(cfg, protos, cfg.n_train, train_rng), _generate(cfg, protos, cfg.n_test, test_rng)


# ---------------------------------------------------------------- scenes

ABSENT = None


@dataclass
class SceneWindow:
    """One 0.5 s window of a scene: a face track per candidate plus the voice."""

    faces: list[np.ndarray]
    voice: np.ndarray | None


@dataclass
class Scene:
    candidates: list[int]
    speaker: int | None
    windows: list[SceneWindow] = field(default_factory=list)


def synth_scenes(cfg: SynthConfig, n_scenes: int, n_windows: int, seed: int,
                 max_distractors: int = 3, p_absent: float = 0.2) -> list[Scene]:
    """Scenes with 0..max_distractors non-speaking faces; a share ``p_absent``
    of scenes do not show the speaker at all. Uses ``cfg``'s prototypes."""
    cfg.validate()
    if len(cfg.dims) != 2:
        raise DataError("scenes need exactly two modalities")
    if max_distractors > cfg.K - 1:
        raise DataError(f"cannot draw {max_distractors} distinct distractors from {cfg.K} identities")
    protos = prototypes(cfg)
    rng = make_rng(seed)
    T = max(cfg.lengths)
    face_idx = duplicate_index(cfg.lengths[0], T)
    voice_idx = duplicate_index(cfg.lengths[1], T)
    scenes = []
    for _ in range(n_scenes):
        speaker = int(rng.integers(cfg.K))
        absent = rng.random() < p_absent
        others = rng.permutation([k for k in range(cfg.K) if k != speaker])
        n_dis = int(rng.integers(max_distractors + 1))
        cands = [int(k) for k in others[:n_dis]]
        if not absent:
            cands.insert(int(rng.integers(len(cands) + 1)), speaker)
        z_voice = latent_walk(n_windows, T, cfg.walk_var, rng)
        voice = render(cfg, protos, 1, np.full(n_windows, speaker), z_voice, rng)[:, voice_idx]
        faces = []
        for k in cands:
            z = z_voice if k == speaker else latent_walk(n_windows, T, cfg.walk_var, rng)
            faces.append(render(cfg, protos, 0, np.full(n_windows, k), z, rng)[:, face_idx])
        windows = [SceneWindow([f[w] for f in faces], voice[w]) for w in range(n_windows)]
        scenes.append(Scene(cands, ABSENT if absent else speaker, windows))
    return scenes


# ---------------------------------------------------------------- files

def _header(seq: FeatureSequence) -> bytes:
    return (f"{HEADER_MAGIC} {HEADER_VERSION} modality={seq.modality} T={seq.T} "
            f"d={seq.d} identity={seq.identity}\n").encode("ascii")


def encode_features(seq: FeatureSequence) -> bytes:
    return _header(seq) + seq.frames.astype("<f8").tobytes(order="C")


def decode_features(raw: bytes, source: str = "<bytes>") -> FeatureSequence:
    nl = raw.find(b"\n")
    if nl < 0:
        raise DataError(f"{source}: byte 0: missing header line")
    try:
        parts = raw[:nl].decode("ascii").split(" ")
    except UnicodeDecodeError as e:
        raise DataError(f"{source}: byte {e.start}: header is not ASCII") from None
    if parts[:2] != [HEADER_MAGIC, HEADER_VERSION] or len(parts) != 6:
        raise DataError(f"{source}: byte 0: bad header {raw[:nl]!r}")
    fields_ = {}
    for p in parts[2:]:
        k, _, v = p.partition("=")
        fields_[k] = v
    try:
        modality, T, d, ident = fields_["modality"], int(fields_["T"]), int(fields_["d"]), int(fields_["identity"])
    except (KeyError, ValueError):
        raise DataError(f"{source}: byte 0: bad header fields {raw[:nl]!r}") from None
    if T < 1 or d < 1:
        raise DataError(f"{source}: byte 0: T and d must be positive")
    blob = raw[nl + 1:]
    if len(blob) != 8 * T * d:
        raise DataError(f"{source}: byte {nl + 1}: expected {8 * T * d} data bytes, found {len(blob)}")
    frames = np.frombuffer(blob, dtype="<f8").astype(np.float64).reshape(T, d)
    bad = np.flatnonzero(~np.isfinite(frames.ravel()))
    if len(bad):
        i = int(bad[0])
        raise DataError(f"{source}: byte {nl + 1 + 8 * i}: non-finite value at frame {i // d}, dim {i % d}")
    return FeatureSequence(modality, frames, ident)


def save_features(path, seq: FeatureSequence) -> None:
    Path(path).write_bytes(encode_features(seq))


def load_features(path) -> FeatureSequence:
    return decode_features(Path(path).read_bytes(), str(path))


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def save_pool(directory, pool: SequencePool) -> Path:
    """Write one feature file per (modality, take) and a ``pool.json`` manifest."""
    directory = Path(directory)
    members = []
    for s, m in enumerate(pool.modalities):
        (directory / m).mkdir(parents=True, exist_ok=True)
        for j in range(len(pool)):
            rel = f"{m}/{j:06d}.mmseq"
            (directory / rel).write_bytes(encode_features(pool.sequence(s, j)))
            members.append({"modality": m, "take": j, "file": rel})
    manifest = {"format": POOL_FORMAT, "modalities": list(pool.modalities), "takes": len(pool), "members": members}
    out = directory / "pool.json"
    _atomic_write(out, json.dumps(manifest, indent=1).encode())
    return out


def load_pool(manifest_path) -> SequencePool:
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"{manifest_path}: {e}") from None
    if manifest.get("format") != POOL_FORMAT:
        raise DataError(f"{manifest_path}: not a {POOL_FORMAT} manifest")
    mods = tuple(manifest["modalities"])
    n_takes = int(manifest["takes"])
    seqs: dict[tuple[int, int], FeatureSequence] = {}
    for mem in manifest["members"]:
        s = mods.index(mem["modality"])
        seq = load_features(manifest_path.parent / mem["file"])
        seqs[(s, int(mem["take"]))] = seq
    if len(seqs) != len(mods) * n_takes:
        raise DataError(f"{manifest_path}: expected {len(mods) * n_takes} members, found {len(seqs)}")
    frames = [np.stack([seqs[(s, j)].frames for j in range(n_takes)]) for s in range(len(mods))]
    identity = np.array([seqs[(0, j)].identity for j in range(n_takes)])
    for s in range(1, len(mods)):
        if any(seqs[(s, j)].identity != identity[j] for j in range(n_takes)):
            raise DataError(f"{manifest_path}: identities disagree across modalities")
    return SequencePool(mods, frames, identity)


SCENE_FORMAT = "MMSCENES v1"


def save_scenes(directory, scenes: list[Scene]) -> Path:
    """One feature file per (scene, window, track) plus ``scenes.json``."""
    directory = Path(directory)
    entries = []
    for si, sc in enumerate(scenes):
        sdir = directory / f"scene{si:04d}"
        sdir.mkdir(parents=True, exist_ok=True)
        windows = []
        for wi, w in enumerate(sc.windows):
            voice = None
            if w.voice is not None:
                voice = f"{sdir.name}/w{wi:02d}_voice.mmseq"
                ident = -1 if sc.speaker is None else sc.speaker
                (directory / voice).write_bytes(encode_features(FeatureSequence("voice", w.voice, ident)))
            faces = []
            for ci, (k, f) in enumerate(zip(sc.candidates, w.faces)):
                rel = f"{sdir.name}/w{wi:02d}_face{ci}.mmseq"
                (directory / rel).write_bytes(encode_features(FeatureSequence("face", f, k)))
                faces.append(rel)
            windows.append({"voice": voice, "faces": faces})
        entries.append({"candidates": sc.candidates,
                        "truth": "ABSENT" if sc.speaker is None else sc.speaker, "windows": windows})
    out = directory / "scenes.json"
    _atomic_write(out, json.dumps({"format": SCENE_FORMAT, "scenes": entries}, indent=1).encode())
    return out


def load_scenes(manifest_path) -> list[Scene]:
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"{manifest_path}: {e}") from None
    if manifest.get("format") != SCENE_FORMAT:
        raise DataError(f"{manifest_path}: not a {SCENE_FORMAT} manifest")
    root = manifest_path.parent
    scenes = []
    for entry in manifest["scenes"]:
        truth = entry["truth"]
        windows = []
        for w in entry["windows"]:
            voice = load_features(root / w["voice"]).frames if w["voice"] else None
            faces = [load_features(root / f).frames for f in w["faces"]]
            if len(faces) != len(entry["candidates"]):
                raise DataError(f"{manifest_path}: window lists {len(faces)} faces for {len(entry['candidates'])} candidates")
            windows.append(SceneWindow(faces, voice))
        scenes.append(Scene([int(k) for k in entry["candidates"]], None if truth == "ABSENT" else int(truth), windows))
    return scenes
