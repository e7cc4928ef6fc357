"""End-to-end acceptance suite.

Each test prints one ``[criterion N] PASS|FAIL ...`` line. Trained models are
cached per seed and shared between criteria 4, 5, 6 and 9.
"""

import json
import time
from functools import lru_cache

import numpy as np
import pytest

from mmlstm import dataset, evaluator, lstm, trainer
from mmlstm import multimodal as mm
from mmlstm.checkpoint import model_arrays
from mmlstm.cli import main as cli_main
from mmlstm.lstm import LstmParams
from mmlstm.numeric import argmax_first, make_rng

SEEDS = (0, 1, 2, 3, 4)
EPOCHS = 5
HIDDEN = 16
N_SCENES = 200
N_EVAL = 2000
MM_VARIANTS = ("full", "half", "none")


def report(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'} {detail}")


def bitwise(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return a.shape == b.shape and a.tobytes() == b.tobytes()


@lru_cache(maxsize=None)
def pools(seed):
    cfg = dataset.SynthConfig(seed=seed)
    return cfg, *dataset.synth_generate(cfg)


@lru_cache(maxsize=None)
def trained(seed, variant):
    cfg, train_pool, test_pool = pools(seed)
    tc = trainer.TrainConfig(epochs=EPOCHS, hidden=HIDDEN, variant=variant, seed=seed)
    model = trainer.init_model(tc, train_pool.dims, cfg.K)
    trainer.train(model, train_pool, None, tc)
    return model


@lru_cache(maxsize=None)
def heldout_set(seed):
    _, _, test_pool = pools(seed)
    return dataset.make_testset(test_pool, N_EVAL, N_EVAL, make_rng(10_000 + seed))


@lru_cache(maxsize=None)
def roc(seed, variant):
    return evaluator.roc_sweep(trained(seed, variant), heldout_set(seed))


# ---------------------------------------------------------------- 1

def test_criterion_1_gradient_check(capsys):
    rng = make_rng(2024)
    start = time.perf_counter()
    worst = {}
    for variant in trainer.VARIANTS:
        cases = [trainer.random_check_case(rng, variant) for _ in range(20)]
        if variant != "single":
            cases.append(trainer.random_check_case(rng, variant, n=3))
        for model, inputs, labels in cases:
            assert all(d <= 6 for d in (model.d_xs if hasattr(model, "d_xs") else (model.d_x,)))
            assert model.K <= 4 and labels.shape[1] <= 5
            res = trainer.grad_check(model, inputs, labels)
            if variant not in worst or res.max_rel_error > worst[variant].max_rel_error:
                worst[variant] = res
    elapsed = time.perf_counter() - start
    max_err = max(r.max_rel_error for r in worst.values())
    ok = max_err < 1e-5 and elapsed < 120
    per = " ".join(f"{v}={r.max_rel_error:.2e}" for v, r in worst.items())
    report(capsys, 1, ok, f"max rel error {max_err:.2e} ({per}); {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- 2

def test_criterion_2_oracle_equivalences(capsys):
    rng = make_rng(7)
    failures = []
    for trial in range(5):
        d_xs = tuple(int(v) for v in rng.integers(1, 7, size=2))
        d_h, K, B, T = int(rng.integers(1, 9)), int(rng.integers(2, 5)), 3, int(rng.integers(1, 7))
        p = mm.build("none", d_xs, d_h, K, rng)
        Xs = [rng.normal(size=(B, T, d)) for d in d_xs]
        labels = rng.integers(K, size=(B, T))
        w = mm.default_weights(p, B, T)
        traces = mm.mm_forward(p, Xs)
        grads = mm.mm_backward(p, traces, labels, w)
        for s in range(2):
            single = LstmParams(**{n: p.arrays[f"{n}/{s}"].copy() for n in lstm.PARAM_NAMES})
            tr = lstm.forward(single, Xs[s])
            if not all(bitwise(getattr(tr, n), getattr(traces[s], n)) for n in "gifoChy"):
                failures.append(f"none forward trial {trial} stream {s}")
            for n, g in lstm.backward(single, tr, labels, w).items():
                if not bitwise(g, grads[f"{n}/{s}"]):
                    failures.append(f"none grad {n}/{s} trial {trial}")

        single = LstmParams.init(d_xs[0], d_h, K, rng)
        keyed = {mm._key(n, 0, "full"): a for n, a in single.arrays().items()}
        shapes = mm.mm_param_shapes("full", (d_xs[0],), d_h, K)
        full = mm.MultimodalParams("full", (d_xs[0],), d_h, K, {k: keyed[k] for k in shapes})
        X = rng.normal(size=(B, T, d_xs[0]))
        tr_s = lstm.forward(single, X)
        (tr_m,) = mm.mm_forward(full, [X])
        if not all(bitwise(getattr(tr_s, n), getattr(tr_m, n)) for n in "gifoChy"):
            failures.append(f"full n=1 forward trial {trial}")
        g_m = mm.mm_backward(full, [tr_m], labels, w)
        for n, g in lstm.backward(single, tr_s, labels, w).items():
            if not bitwise(g, g_m[mm._key(n, 0, "full")]):
                failures.append(f"full n=1 grad {n} trial {trial}")
    ok = not failures
    report(capsys, 2, ok, "none == two single LSTMs, full(n=1) == single LSTM, bitwise"
           + ("" if ok else f"; mismatches: {failures[:5]}"))
    assert ok


# ---------------------------------------------------------------- 3

def test_criterion_3_parameter_counts(capsys):
    rng = make_rng(3)
    bad = []
    for variant in ("single", *MM_VARIANTS):
        for _ in range(10):
            d_h, K = int(rng.integers(1, 65)), int(rng.integers(2, 50))
            if variant == "single":
                d_x = int(rng.integers(1, 200))
                got = LstmParams.init(d_x, d_h, K, rng).count()
                want = 4 * d_h * (d_x + d_h + 1) + K * d_h
            else:
                n = int(rng.integers(1, 4))
                d_xs = tuple(int(v) for v in rng.integers(1, 200, size=n))
                got = mm.build(variant, d_xs, d_h, K, rng).count()
                n_h = n if variant == "none" else 1
                n_y = 1 if variant == "full" else n
                want = sum(4 * d_h * (d + 1) for d in d_xs) + n_h * 4 * d_h * d_h + n_y * K * d_h
            if got != want:
                bad.append((variant, got, want))
    ok = not bad
    report(capsys, 3, ok, f"40 random draws, {len(bad)} mismatches")
    assert ok


# ---------------------------------------------------------------- 4

def frame_baseline_accuracy(seed):
    _, train_pool, test_pool = pools(seed)
    face_train, face_test = train_pool.aligned()[0], test_pool.aligned()[0]
    T = face_train.shape[1]
    clf = lstm.fit_linear_softmax(face_train.reshape(-1, face_train.shape[2]), np.repeat(train_pool.identity, T))
    pred = [lstm.frame_average_baseline(x, clf) for x in face_test]
    return float(np.mean(np.asarray(pred) == test_pool.identity))


def test_criterion_4_lstm_beats_frame_average(capsys):
    start = time.perf_counter()
    rows, wins = [], 0
    for seed in SEEDS:
        _, _, test_pool = pools(seed)
        model = trained(seed, "single")
        y = lstm.forward(model, test_pool.aligned()[0]).y[:, -1]
        acc_lstm = float(np.mean(argmax_first(y) == test_pool.identity))
        acc_base = frame_baseline_accuracy(seed)
        win = acc_lstm - acc_base >= 0.03
        wins += win
        rows.append(f"seed{seed}: lstm={acc_lstm:.4f} frame-avg={acc_base:.4f}")
    ok = wins >= 4
    report(capsys, 4, ok, f"{wins}/5 seeds with margin >= 3pp; {'; '.join(rows)}; {time.perf_counter() - start:.0f}s")
    assert ok


# ---------------------------------------------------------------- 5

def test_criterion_5_sharing_ordering(capsys):
    start = time.perf_counter()
    rows, wins, none_over_half = [], 0, 0
    for seed in SEEDS:
        area = {v: evaluator.roc_area(roc(seed, v)) for v in MM_VARIANTS}
        wins += area["full"] > area["none"] and area["full"] > area["half"]
        none_over_half += area["none"] > area["half"]
        rows.append(f"seed{seed}: " + " ".join(f"{v}={a:.4f}" for v, a in area.items()))
    ok = wins >= 4
    report(capsys, 5, ok, f"full best in {wins}/5 seeds; none > half in {none_over_half}/5 (reported only); "
           f"{'; '.join(rows)}; {time.perf_counter() - start:.0f}s")
    assert ok


# ---------------------------------------------------------------- 6

def test_criterion_6_roc_structure(capsys):
    bad = []
    for seed in SEEDS:
        for v in MM_VARIANTS:
            pts = roc(seed, v)
            rej = [p.genuine_rejection_rate for p in pts]
            acc = [p.distractor_acceptance_rate for p in pts]
            if any(b > a for a, b in zip(rej, rej[1:])) or any(b < a for a, b in zip(acc, acc[1:])):
                bad.append(f"seed{seed}/{v} monotonicity")
            if pts[-1].m != pools(seed)[1].T or rej[-1] != 0.0 or acc[-1] != 1.0:
                bad.append(f"seed{seed}/{v} m=T rejects")
    ok = not bad
    report(capsys, 6, ok, f"{len(SEEDS) * len(MM_VARIANTS)} checkpoints, violations: {bad or 'none'}")
    assert ok


# ---------------------------------------------------------------- 7

def test_criterion_7_duplicate_sweep(capsys):
    violations, cases = 0, 0
    for T_target in range(1, 201):
        for T in range(1, T_target + 1):
            cases += 1
            idx = dataset.duplicate_index(T, T_target)
            counts = np.bincount(idx, minlength=T)
            if (len(idx) != T_target or np.any(np.diff(idx) < 0) or idx[0] != 0 or idx[-1] != T - 1
                    or counts.min() < 1 or counts.max() - counts.min() > 1):
                violations += 1
    ok = violations == 0
    report(capsys, 7, ok, f"{cases} (T, T_target) pairs, {violations} violations")
    assert ok


# ---------------------------------------------------------------- 8

def test_criterion_8_determinism(tmp_path, capsys):
    data = tmp_path / "data"
    assert cli_main(["synth", "--out", str(data), "--n-train", "60", "--n-test", "20", "--seed", "5"]) == 0
    outputs = []
    for run in ("a", "b"):
        rc = cli_main(["train", "--data", str(data), "--out", str(tmp_path / run / "ckpt"), "--variant", "full",
                       "--epochs", "2", "--seed", "9", "--deterministic", "--report-dir", str(tmp_path / run)])
        assert rc == 0
        outputs.append({p.relative_to(tmp_path / run): p.read_bytes()
                        for p in sorted((tmp_path / run).rglob("*")) if p.is_file()})
    a, b = outputs
    ok = a.keys() == b.keys() and all(a[k] == b[k] for k in a) and len(a) == 3
    report(capsys, 8, ok, f"{len(a)} files compared byte for byte: {sorted(map(str, a))}")
    assert ok


# ---------------------------------------------------------------- 9

def operating_m(seed, variant):
    """Threshold with the best accuracy on the held-out genuine/distractor set."""
    pts = roc(seed, variant)
    return max(pts, key=lambda p: (p.accuracy, -p.m)).m


def test_criterion_9_scenes(capsys):
    n_windows = evaluator.windows_in(max(evaluator.TABLE_WINDOWS))
    rows, beats_chance, beats_none = [], 0, 0
    tables = []
    for seed in SEEDS:
        cfg, _, _ = pools(seed)
        scenes = dataset.synth_scenes(cfg, N_SCENES, n_windows, seed=20_000 + seed)
        res = {}
        for v in ("full", "none"):
            m = operating_m(seed, v)
            res[v] = evaluator.scene_accuracy(trained(seed, v), scenes, m).accuracy
        m_full = operating_m(seed, "full")
        decisions = evaluator.scene_decisions(trained(seed, "full"), scenes, m_full, 1)
        chance = evaluator.shuffle_chance(scenes, decisions, trials=200, seed=seed)
        table = evaluator.vote_table(trained(seed, "full"), scenes, m_full)
        tables.append(list(table.values()))
        beats_chance += res["full"] > chance
        beats_none += res["full"] > res["none"]
        rows.append(f"seed{seed}: full={res['full']:.3f} none={res['none']:.3f} chance={chance:.3f} "
                    f"votes={' '.join(f'{a:.3f}' for a in table.values())}")
    mean_table = np.mean(tables, axis=0)
    monotone = bool(np.all(np.diff(mean_table) >= 0))
    ok = beats_chance == len(SEEDS) and beats_none >= 4 and monotone
    report(capsys, 9, ok, f"full > chance in {beats_chance}/5, full > none in {beats_none}/5, mean vote table "
           f"{' '.join(f'{a:.3f}' for a in mean_table)} ({'non-decreasing' if monotone else 'NOT monotone'}); "
           + "; ".join(rows))
    assert ok
