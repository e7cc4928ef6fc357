"""``mmlstm`` command line: synth, train, gradcheck, eval-roc, eval-scenes, predict.

Every command takes an optional YAML ``--config`` file with ``synth``,
``train`` and ``eval`` sections; command-line flags override it. The merged
configuration is written next to every output.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from dataclasses import fields
from pathlib import Path

import numpy as np
import yaml

from . import checkpoint, dataset, evaluator, lstm, trainer
from . import multimodal as mm
from .lstm import LstmParams
from .numeric import ShapeError, make_rng

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
REPORT_ENV = "MMLSTM_REPORT_DIR"
GRAD_TOL = 1e-5

log = logging.getLogger("mmlstm")


class ConfigError(ValueError):
    pass


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = yaml.safe_load(Path(path).read_text()) or {}
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"config {path} must be a mapping")
    return cfg


def _merge(cls, section: dict, overrides: dict):
    names = {f.name for f in fields(cls)}
    unknown = set(section) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    values = {**section, **{k: v for k, v in overrides.items() if k in names and v is not None}}
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None


def _synth_config(args, cfg) -> dataset.SynthConfig:
    over = {"K": args.K, "noise": args.noise, "coupling": args.coupling, "degrade": args.degrade,
            "n_train": args.n_train, "n_test": args.n_test, "seed": args.seed}
    sc = _merge(dataset.SynthConfig, cfg.get("synth", {}), over)
    try:
        return sc.validate()
    except dataset.DataError as e:
        raise ConfigError(str(e)) from None


def _train_config(args, cfg) -> trainer.TrainConfig:
    over = {"variant": args.variant, "epochs": args.epochs, "lr": args.lr, "batch_size": args.batch_size,
            "hidden": args.hidden, "optimizer": args.optimizer, "clip": args.clip, "seed": args.seed}
    tc = _merge(trainer.TrainConfig, cfg.get("train", {}), over)
    try:
        return tc.validate()
    except ValueError as e:
        raise ConfigError(str(e)) from None


def _eval_section(args, cfg) -> dict:
    ev = dict(cfg.get("eval", {}))
    if getattr(args, "m_list", None):
        ev["m_list"] = args.m_list
    if getattr(args, "vote_window", None):
        ev["vote_window"] = args.vote_window
    if getattr(args, "m", None) is not None:
        ev["m"] = args.m
    return ev


def _report_dir(args) -> Path:
    d = Path(args.report_dir or os.environ.get(REPORT_ENV, "reports"))
    d.mkdir(parents=True, exist_ok=True)
    return d


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _write_json(path: Path, obj) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


# ---------------------------------------------------------------- commands

def cmd_synth(args, cfg) -> int:
    sc = _synth_config(args, cfg)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as e:
        print(f"error: cannot write to {out}: {e}", file=sys.stderr)
        return EXIT_CONFIG
    train_pool, test_pool = dataset.synth_generate(sc)
    dataset.save_pool(out / "train", train_pool)
    dataset.save_pool(out / "test", test_pool)
    if args.scenes:
        n_windows = evaluator.windows_in(max(evaluator.TABLE_WINDOWS))
        scenes = dataset.synth_scenes(sc, args.scenes, n_windows, seed=sc.seed + 7919)
        dataset.save_scenes(out / "scenes", scenes)
    _write_json(out / "synth.json", {"synth": sc.to_dict()})
    for name, pool in (("train", train_pool), ("test", test_pool)):
        counts = np.bincount(pool.identity, minlength=sc.K)
        for s, m in enumerate(pool.modalities):
            print(f"{name} {m}: " + " ".join(f"class{k}={c}" for k, c in enumerate(counts)))
    return EXIT_OK


def _load_pools(data: Path):
    train_pool = dataset.load_pool(data / "train" / "pool.json")
    test_path = data / "test" / "pool.json"
    return train_pool, dataset.load_pool(test_path) if test_path.exists() else None


def cmd_train(args, cfg) -> int:
    tc = _train_config(args, cfg)
    data = Path(args.data)
    train_pool, test_pool = _load_pools(data)
    K = int(train_pool.identity.max()) + 1
    model = trainer.init_model(tc, train_pool.dims, K)
    report = _report_dir(args)
    metrics = Path(args.metrics) if args.metrics else report / "metrics.jsonl"
    synth = {}
    if (data / "synth.json").exists():
        synth = json.loads((data / "synth.json").read_text())
    meta = {"data": synth, "config": cfg}
    result = trainer.train(model, train_pool, test_pool, tc, metrics_path=metrics, checkpoint_path=args.out, meta=meta)
    manifest = checkpoint.read_manifest(args.out)
    n_params = sum(a.size for a in checkpoint.model_arrays(model).values())
    print(f"variant={manifest['variant']} d_x={manifest['d_x']} d_h={manifest['d_h']} K={manifest['K']} "
          f"params={n_params}")
    if result.history:
        last = result.history[-1]
        print(f"final loss={last['loss']:.6f}" + (f" accuracy={last['accuracy']:.4f}" if "accuracy" in last else ""))
    return EXIT_OK


def cmd_gradcheck(args, cfg) -> int:
    variants = [args.variant] if args.variant else list(trainer.VARIANTS)
    rng = make_rng(args.seed if args.seed is not None else 0)
    worst = None
    lines = []
    for v in variants:
        cases = [trainer.random_check_case(rng, v) for _ in range(args.configs)]
        if v != "single" and args.configs > 0:
            cases.append(trainer.random_check_case(rng, v, n=3))
        for model, inputs, labels in cases:
            analytic = None
            if args.corrupt:
                B, T = labels.shape
                w = trainer.mean_weights(model, B, T)
                _, analytic = trainer.loss_and_grad(model, inputs, labels, w)
                key = max(analytic, key=lambda k: np.abs(analytic[k]).max())
                analytic[key].reshape(-1)[int(np.abs(analytic[key]).argmax())] *= 1.01
            res = trainer.grad_check(model, inputs, labels, eps=args.eps, analytic=analytic)
            if worst is None or res.max_rel_error > worst[1].max_rel_error:
                worst = (v, res)
        lines.append(f"{v}: {len(cases)} configs checked")
    for line in lines:
        print(line)
    v, res = worst
    ok = res.max_rel_error < GRAD_TOL
    print(f"max relative error {res.max_rel_error:.3e} ({'PASS' if ok else 'FAIL'} at tol {GRAD_TOL:g}); "
          f"worst entry: variant={v} param={res.key} index={res.index} analytic={res.analytic:.6e} "
          f"numeric={res.numeric:.6e}")
    return EXIT_OK if ok else EXIT_NUMERIC


def _load_model(path):
    try:
        return checkpoint.load(path)
    except FileNotFoundError:
        raise dataset.DataError(f"checkpoint {path} not found") from None


def cmd_eval_roc(args, cfg) -> int:
    model, manifest = _load_model(args.checkpoint)
    if manifest["kind"] != "multimodal":
        raise ConfigError("eval-roc needs a multimodal checkpoint")
    ev = _eval_section(args, cfg)
    _, test_pool = _load_pools(Path(args.data))
    if test_pool is None:
        raise dataset.DataError(f"{args.data} has no test pool")
    seed = args.seed if args.seed is not None else 0
    ts = dataset.make_testset(test_pool, args.n_genuine, args.n_distractor, make_rng(seed))
    m_list = ev.get("m_list") or list(range(test_pool.T + 1))
    points = evaluator.roc_sweep(model, ts, m_list, far_mode=ev.get("far_mode", "reject-or-mislabel"),
                                 average=ev.get("average", "prob"))
    report = _report_dir(args)
    with open(report / "roc.jsonl", "w") as fh:
        for p in points:
            fh.write(json.dumps(p.to_dict()) + "\n")
    rows = ["m\tFAR\taccuracy"] + [f"{p.m}\t{p.false_alarm_rate:.6f}\t{p.accuracy:.6f}" for p in points]
    (report / "roc.tsv").write_text("\n".join(rows) + "\n")
    _write_json(report / "roc.meta.json", {"checkpoint": str(args.checkpoint), "eval": ev, "config": cfg,
                                           "area": evaluator.roc_area(points), "seed": seed})
    print("\n".join(rows))
    print(f"area {evaluator.roc_area(points):.6f}")
    return EXIT_OK


def cmd_eval_scenes(args, cfg) -> int:
    model, manifest = _load_model(args.checkpoint)
    if manifest["kind"] != "multimodal" or len(manifest["d_x"]) != 2:
        raise ConfigError("eval-scenes needs a two-modality checkpoint")
    ev = _eval_section(args, cfg)
    scenes = dataset.load_scenes(Path(args.scenes) / "scenes.json")
    m = int(ev.get("m", 2))
    windows = ev.get("vote_window") or list(evaluator.TABLE_WINDOWS)
    table = evaluator.vote_table(model, scenes, m, windows)
    trivial = sum(1 for sc in scenes if not sc.candidates)
    report = _report_dir(args)
    header = "Time window (s)\t" + "\t".join(f"{w:g}" for w in windows)
    row = f"{manifest['variant']}\t" + "\t".join(f"{100 * a:.2f}" for a in table.values())
    (report / "scenes.tsv").write_text(header + "\n" + row + "\n")
    _write_json(report / "scenes.meta.json", {"checkpoint": str(args.checkpoint), "m": m, "trivial_scenes": trivial,
                                              "accuracy": {str(k): v for k, v in table.items()}, "config": cfg})
    print(header)
    print(row)
    if trivial:
        print(f"note: {trivial} scene(s) had no candidates and were counted as trivially successful")
    return EXIT_OK


def cmd_predict(args, cfg) -> int:
    model, manifest = _load_model(args.checkpoint)
    seqs = [dataset.load_features(p) for p in args.inputs]
    if isinstance(model, LstmParams):
        if len(seqs) != 1:
            raise ConfigError("a single-modal checkpoint takes exactly one input file")
        print(lstm.predict_last(model, seqs[0].frames))
        return EXIT_OK
    if len(seqs) != model.n:
        raise ConfigError(f"checkpoint expects {model.n} input files, got {len(seqs)}")
    T = max(s.T for s in seqs)
    frames = [dataset.duplicate_evenly(s, T).frames for s in seqs]
    ev = _eval_section(args, cfg)
    if model.n == 2:
        d = evaluator.classify_with_rejection(model, frames, int(ev.get("m", T)))
        print("REJECTED" if d == evaluator.REJECTED else d)
    else:
        print(" ".join(map(str, mm.mm_predict(model, frames)[:, -1])))
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "gradcheck": cmd_gradcheck,
            "eval-roc": cmd_eval_roc, "eval-scenes": cmd_eval_scenes, "predict": cmd_predict}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML file with synth/train/eval sections")
    common.add_argument("--seed", type=int)
    common.add_argument("--deterministic", action="store_true", help="force single-threaded numerics")
    common.add_argument("--report-dir", help=f"report directory (default ${REPORT_ENV} or ./reports)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="mmlstm", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate synthetic train/test pools")
    s.add_argument("--out", required=True)
    s.add_argument("--K", type=int)
    s.add_argument("--noise", type=float)
    s.add_argument("--coupling", type=float)
    s.add_argument("--degrade", type=float)
    s.add_argument("--n-train", type=int)
    s.add_argument("--n-test", type=int)
    s.add_argument("--scenes", type=int, default=0, help="also write this many evaluation scenes")

    t = sub.add_parser("train", parents=[common], help="train a model on a pool directory")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint directory")
    t.add_argument("--metrics", help="metrics file (default <report-dir>/metrics.jsonl)")
    t.add_argument("--variant", choices=trainer.VARIANTS)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--hidden", type=int)
    t.add_argument("--optimizer", choices=("adam", "sgd-momentum"))
    t.add_argument("--clip", type=float)

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    g.add_argument("--variant", choices=trainer.VARIANTS)
    g.add_argument("--configs", type=int, default=20)
    g.add_argument("--eps", type=float, default=1e-5)
    g.add_argument("--corrupt", action="store_true", help="self-test: perturb one analytic entry by 1%%")

    r = sub.add_parser("eval-roc", parents=[common], help="ROC sweep over the rejection threshold")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--m-list", type=_ints)
    r.add_argument("--n-genuine", type=int, default=2000)
    r.add_argument("--n-distractor", type=int, default=2000)

    e = sub.add_parser("eval-scenes", parents=[common], help="scene-level speaker identification")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--scenes", required=True, help="directory holding scenes.json")
    e.add_argument("--m", type=int)
    e.add_argument("--vote-window", type=_floats, help="comma-separated window sizes in seconds")

    q = sub.add_parser("predict", parents=[common], help="classify feature files")
    q.add_argument("--checkpoint", required=True)
    q.add_argument("inputs", nargs="+", help="one MMSEQ file per modality")
    q.add_argument("--m", type=int)
    return p


def _threads(deterministic: bool):
    if not deterministic:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=1)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = _load_config(args.config)
        with _threads(args.deterministic):
            return COMMANDS[args.command](args, cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (dataset.DataError, checkpoint.CheckpointError, ShapeError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
