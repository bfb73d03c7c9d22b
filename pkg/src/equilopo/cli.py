"""Command-line entry point: ``equilopo <verb> [options]``.

Exit codes: 0 success, 1 a check failed, 2 usage or file-format error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import config as cfgmod
from .container import ContainerError

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _emit(obj, out=None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True, default=float)
    if out:
        d = os.path.dirname(os.path.abspath(out))
        os.makedirs(d, exist_ok=True)
        with open(out, "w") as fh:
            fh.write(text + "\n")
    print(text)


def _load_config(path) -> dict:
    return cfgmod.load(path) if path else {}


def _out_dir(args, default: str) -> str:
    return args.out if args.out else default


# ---------------------------------------------------------------------------
# verbs
# ---------------------------------------------------------------------------


def cmd_verify(args) -> int:
    from . import verify

    report = verify.run(args.scope, seed=args.seed or 0, cg_cache=args.cg_cache)
    _emit(report, args.out)
    return EXIT_OK if report["passed"] else EXIT_FAIL


def cmd_audit_activation(args) -> int:
    from .audit import audit_activation, write_activation_audit

    a = audit_activation(args.strategy, args.L_in, args.samples, seed=args.seed or 0)
    out = _out_dir(args, "audit_activation")
    files = write_activation_audit(a, out, bins=args.bins)
    summary = {**a.summary(), "files": files}
    _emit(summary, os.path.join(out, "summary.json"))
    return EXIT_OK


def cmd_audit_softmax(args) -> int:
    from .audit import audit_softmax, write_softmax_audit

    a = audit_softmax(args.signals, args.L, args.rotations, seed=args.seed or 0)
    out = _out_dir(args, "audit_softmax")
    path = write_softmax_audit(a, out)
    _emit({**a.summary(), "file": path}, os.path.join(out, "summary.json"))
    return EXIT_OK


def cmd_make_dataset(args) -> int:
    from .dataset import write_dataset

    cfg = _load_config(args.config)
    spec = cfgmod.dataset_spec(cfg, args.seed)
    out = args.out or cfg.get("paths", {}).get("data") or "data"
    paths = write_dataset(spec, out)
    _emit({"spec": spec.to_dict(), "files": paths})
    return EXIT_OK


def _data_dir(args, cfg) -> str:
    d = args.data or cfg.get("paths", {}).get("data")
    if not d:
        raise UsageError("no dataset directory: pass --data or set [paths] data")
    return d


def cmd_train(args) -> int:
    from .dataset import load_split
    from .train import build_model, save_checkpoint, train

    cfg = _load_config(args.config)
    model = cfgmod.model_description(cfg, args.seed)
    tcfg = cfgmod.train_config(cfg, args.seed)
    data = _data_dir(args, cfg)
    Xtr, ytr, _ = load_split(os.path.join(data, "train.elpo"))
    val_path = os.path.join(data, "val.elpo")
    val = load_split(val_path)[:2] if os.path.exists(val_path) else None
    out = args.out or "run"
    os.makedirs(out, exist_ok=True)
    paths = cfg.get("paths", {})
    metrics = paths.get("metrics") or os.path.join(out, "metrics.jsonl")
    ckpt = paths.get("checkpoint") or os.path.join(out, "checkpoint.elpo")
    net = build_model(model)
    log = None if args.quiet else (lambda m: print(m, file=sys.stderr, flush=True))
    records = train(net, (Xtr, ytr), tcfg, val_data=val, metrics_path=metrics, log=log)
    save_checkpoint(ckpt, net, tcfg, {"records": records})
    _emit({"checkpoint": ckpt, "metrics": metrics, "final": records[-2:] if records else []})
    return EXIT_OK


def cmd_infer(args) -> int:
    from .dataset import load_split
    from .train import load_checkpoint, predict

    net, _ = load_checkpoint(args.checkpoint)
    X, y, _ = load_split(args.input)
    scores = predict(net, X)
    pred = scores.argmax(axis=1)
    rows = [["index"] + [f"score_{c}" for c in range(scores.shape[1])] + ["predicted", "label"]]
    for i in range(len(X)):
        rows.append([i] + [repr(float(s)) for s in scores[i]] + [int(pred[i]), int(y[i])])
    if args.out:
        os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
        with open(args.out, "w", newline="") as fh:
            csv.writer(fh).writerows(rows)
    else:
        csv.writer(sys.stdout).writerows(rows)
    print(json.dumps({"samples": len(X), "accuracy": float(np.mean(pred == y)) if len(X) else None}),
          file=sys.stderr)
    return EXIT_OK


def cmd_grad_check(args) -> int:
    from .gradcheck import REGISTRY, grad_check

    ops = args.ops or sorted(REGISTRY)
    unknown = [o for o in ops if o not in REGISTRY]
    if unknown:
        raise UsageError(f"unknown op(s) {unknown}; known: {sorted(REGISTRY)}")
    reports = [grad_check(o, tol=args.tol, seed=args.seed or 0).to_dict() for o in ops]
    passed = all(r["passed"] for r in reports)
    _emit({"passed": passed, "tol": args.tol, "ops": reports}, args.out)
    return EXIT_OK if passed else EXIT_FAIL


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI configuration file")
    common.add_argument("--seed", type=int, default=None, help="override every seed")
    common.add_argument("--threads", type=int, default=None, help="numba/BLAS threads (1 is bitwise deterministic)")
    common.add_argument("--out", help="output file or directory")

    p = argparse.ArgumentParser(prog="equilopo", description="SO(3)-equivariant voxel CNN toolkit")
    sub = p.add_subparsers(dest="verb", required=True)

    v = sub.add_parser("verify", parents=[common], help="run invariant checks")
    v.add_argument("scope", choices=("math", "signal", "conv", "nonlinear", "network", "all"))
    v.add_argument("--cg-cache", help="CG table container to check (written if missing)")
    v.set_defaults(func=cmd_verify)

    a = sub.add_parser("audit-activation", parents=[common], help="sample the local activation")
    a.add_argument("--strategy", default="adaptive", choices=("adaptive", "constant"))
    a.add_argument("--L-in", dest="L_in", type=int, default=2)
    a.add_argument("--samples", type=int, default=1_000_000)
    a.add_argument("--bins", type=int, default=100)
    a.set_defaults(func=cmd_audit_activation)

    s = sub.add_parser("audit-softmax", parents=[common], help="softmax pooling versus sampled maximum")
    s.add_argument("--signals", type=int, default=1000)
    s.add_argument("--L", type=int, default=1)
    s.add_argument("--rotations", type=int, default=1_000_000)
    s.set_defaults(func=cmd_audit_softmax)

    m = sub.add_parser("make-dataset", parents=[common], help="write the synthetic motif dataset")
    m.set_defaults(func=cmd_make_dataset)

    t = sub.add_parser("train", parents=[common], help="train a network")
    t.add_argument("--data", help="dataset directory with train.elpo / val.elpo")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", parents=[common], help="score a dataset container with a checkpoint")
    i.add_argument("checkpoint")
    i.add_argument("input")
    i.set_defaults(func=cmd_infer)

    g = sub.add_parser("grad-check", parents=[common], help="central-difference gradient audit")
    g.add_argument("ops", nargs="*")
    g.add_argument("--tol", type=float, default=1e-4)
    g.set_defaults(func=cmd_grad_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be >= 1", file=sys.stderr)
            return EXIT_USAGE
        from ._jit import set_threads

        set_threads(args.threads)
    try:
        return args.func(args)
    except (ContainerError, cfgmod.ConfigError, UsageError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
