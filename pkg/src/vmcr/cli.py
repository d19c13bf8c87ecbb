"""Command-line entry point: gradcheck, gen-data, gen-mask, train, eval,
report. All randomness flows from the --seed / config seeds; worker threads
default to 1 for determinism (override with VMCR_THREADS)."""

from __future__ import annotations

import os

_threads = os.environ.get("VMCR_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(_var, _threads)

import argparse
import shutil
import sys
from dataclasses import fields

import numpy as np
from PIL import Image

from . import data as vdata
from . import trainer as vtrainer
from .errors import ConfigError, DataError, EmptyEvalError, VmcrError
from .losses import LossConfig
from .metrics import MetricsRow
from .model import UNetConfig
from .perturb import gen_mask
from .trainer import TrainConfig
from .verification import CASES, run_suite

# -- plain key=value config files (unknown keys are errors) -----------------


def parse_kv_file(path: str) -> dict[str, str]:
    out = {}
    try:
        lines = open(path).read().splitlines()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    for ln, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{ln}: expected key = value, got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{path}:{ln}: empty key")
        if key in out:
            raise ConfigError(f"{path}:{ln}: duplicate key {key!r}")
        out[key] = val
    return out


def _convert(path: str, key: str, val: str, typ):
    try:
        if typ is bool:
            if val.lower() in ("true", "1", "yes"):
                return True
            if val.lower() in ("false", "0", "no"):
                return False
            raise ValueError(val)
        return typ(val)
    except ValueError as e:
        raise ConfigError(f"{path}: field {key!r}: cannot parse {val!r} "
                          f"as {typ.__name__}") from e


def load_domain_config(path: str) -> vdata.DomainConfig:
    kv = parse_kv_file(path)
    known = {f.name: f.type for f in fields(vdata.DomainConfig)}
    types = {"intensity_gain": float, "gamma": float, "blur_sigma": float,
             "noise_std": float, "vessel_width_scale": float,
             "background_texture_scale": float, "seed": int}
    kwargs = {}
    for key, val in kv.items():
        if key not in known:
            raise ConfigError(f"{path}: unknown key {key!r} "
                              f"(known: {sorted(known)})")
        kwargs[key] = _convert(path, key, val, types[key])
    return vdata.DomainConfig(**kwargs)


_TRAIN_KEYS = {
    "name": str, "mode": str, "iterations": int, "batch_size": int,
    "image_size": int, "eval_every": int, "seed": int, "lr": float,
    "mask_sigma": float, "augment_target": bool,
    "pos_weight": float, "ema_alpha": float, "confidence_threshold": float,
    "lambda_scale": float, "two_sided_confidence": bool,
    "depth": int, "base_channels": int, "in_channels": int,
    "source": str, "target": str,
    "train_n": int, "val_n": int, "test_n": int, "data_seed": int,
}

_LOSS_KEYS = ("pos_weight", "ema_alpha", "confidence_threshold",
              "lambda_scale", "two_sided_confidence")
_UNET_KEYS = ("depth", "base_channels", "in_channels")
_DATA_KEYS = ("name", "source", "target", "train_n", "val_n", "test_n",
              "data_seed")


def load_experiment(path: str, overrides: dict) -> tuple[TrainConfig, dict]:
    kv = parse_kv_file(path)
    for key in kv:
        if key not in _TRAIN_KEYS:
            raise ConfigError(f"{path}: unknown key {key!r} "
                              f"(known: {sorted(_TRAIN_KEYS)})")
    vals = {k: _convert(path, k, v, _TRAIN_KEYS[k]) for k, v in kv.items()}
    vals.update({k: v for k, v in overrides.items() if v is not None})
    loss = LossConfig(**{k: vals.pop(k) for k in _LOSS_KEYS if k in vals})
    net = UNetConfig(**{k: vals.pop(k) for k in _UNET_KEYS if k in vals})
    dataspec = {k: vals.pop(k) for k in _DATA_KEYS if k in vals}
    if "source" not in dataspec or "target" not in dataspec:
        raise ConfigError(f"{path}: 'source' and 'target' are required "
                          "(domain:<file> or dir:<path>)")
    cfg = TrainConfig(loss=loss, unet=net, **vals)
    return cfg, dataspec


def _resolve_dataset(spec: str, role: str, size: int, n_train: int,
                     data_seed: int, stream: int):
    """spec is 'domain:<cfgfile>' (synthetic) or 'dir:<path>' (files).
    Returns the training list (image, LabelMap) resized to `size`."""
    if spec.startswith("domain:"):
        domain = load_domain_config(spec[len("domain:"):])
        return vdata.make_dataset(domain, n_train, size, size,
                                  seed=data_seed * 10 + stream), domain
    if spec.startswith("dir:"):
        raw = vdata.load_dataset(spec[len("dir:"):])
        return [vdata.resize_normalize(img, lbl, size) for img, lbl in raw], None
    raise ConfigError(f"{role}: expected 'domain:<file>' or 'dir:<path>', "
                      f"got {spec!r}")


# -- subcommands --------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    ops = [args.op] if args.op else None
    if args.op and args.op not in CASES:
        print(f"unknown op {args.op!r}; known: {', '.join(sorted(CASES))}",
              file=sys.stderr)
        return 2
    results = run_suite(ops=ops, seeds=args.seeds)
    worst = {}
    ok = True
    for r in results:
        worst[r.op] = max(worst.get(r.op, 0.0), r.max_rel_error)
        ok = ok and r.passed
    for op, err in worst.items():
        status = "PASS" if err < 1e-4 else "FAIL"
        print(f"{status}  {op:16s} max rel error {err:.3e}")
    return 0 if ok else 1


def cmd_gen_mask(args) -> int:
    mask = gen_mask(args.height, args.width, args.sigma, args.seed)
    Image.fromarray(mask.bits * 255, mode="L").save(args.out)
    print(f"wrote {args.out} (ones fraction {mask.bits.mean():.3f})")
    return 0


def cmd_gen_data(args) -> int:
    domain = load_domain_config(args.domain)
    if os.path.isdir(args.out_dir) and os.listdir(args.out_dir):
        if not args.force:
            print(f"{args.out_dir} is not empty (use --force)", file=sys.stderr)
            return 2
    samples = vdata.make_dataset(domain, args.n, args.size, args.size,
                                 seed=args.seed)
    for i, (img, lbl) in enumerate(samples):
        vdata.save_sample(img, lbl, args.out_dir, f"sample_{i:04d}")
    print(f"wrote {args.n} image+label pairs to {args.out_dir}")
    return 0


def _write_metrics_csv(path: str, rows: list[MetricsRow],
                       aggregate: MetricsRow, ids=None):
    with open(path, "w") as f:
        f.write("image,f1,acc,sen,sp\n")
        for i, row in enumerate(rows):
            name = ids[i] if ids else str(i)
            f.write(",".join([name] + row.csv_fields()) + "\n")
        f.write(",".join(["aggregate"] + aggregate.csv_fields()) + "\n")


def cmd_train(args) -> int:
    overrides = {"mode": args.mode, "iterations": args.iterations,
                 "image_size": args.size, "mask_sigma": args.sigma,
                 "seed": args.seed}
    cfg, dataspec = load_experiment(args.config, overrides)
    out = args.out
    if os.path.exists(out):
        if not args.force:
            print(f"{out} already exists (use --force)", file=sys.stderr)
            return 2
        shutil.rmtree(out)
    os.makedirs(out)

    size = cfg.image_size
    n_train = dataspec.get("train_n", 20)
    n_val = dataspec.get("val_n", 8)
    n_test = dataspec.get("test_n", 10)
    data_seed = dataspec.get("data_seed", 1)

    source_train, source_domain = _resolve_dataset(
        dataspec["source"], "source", size, n_train, data_seed, stream=0)
    target_train, target_domain = _resolve_dataset(
        dataspec["target"], "target", size, n_train, data_seed, stream=1)

    # validation from the labeled domain; test from the target domain
    val_domain = target_domain if cfg.mode == "target-only" else source_domain
    source_val = (vdata.make_dataset(val_domain, n_val, size, size,
                                     seed=data_seed * 10 + 2)
                  if val_domain is not None else None)
    target_test = (vdata.make_dataset(target_domain, n_test, size, size,
                                      seed=data_seed * 10 + 3)
                   if target_domain is not None else target_train)

    result = vtrainer.train(cfg, source_train, target_train,
                            source_val=source_val)
    vtrainer.save_checkpoint(os.path.join(out, "checkpoint.vmcr"),
                             result.checkpoint)
    vtrainer.write_log_csv(os.path.join(out, "train_log.csv"), result.log)

    eval_pair = vtrainer.restore_pair(result.checkpoint, cfg.unet,
                                      use_best=result.best_teacher)
    ev = vtrainer.evaluate(eval_pair, target_test, use_teacher=True)
    _write_metrics_csv(os.path.join(out, "metrics.csv"), ev.rows, ev.aggregate)

    with open(os.path.join(out, "run_info.txt"), "w") as f:
        f.write(f"name = {dataspec.get('name', 'run')}\n")
        f.write(f"mode = {cfg.mode}\n")
        f.write(f"seed = {cfg.seed}\n")
        f.write(f"iterations = {cfg.iterations}\n")
        if result.best_f1 is not None:
            f.write(f"best_val_f1 = {result.best_f1:.6f}\n")
            f.write(f"best_iteration = {result.best_iteration}\n")
    agg = ev.aggregate
    print(f"[{cfg.mode}] target F1 {agg.f1:.4f} Acc {agg.acc:.4f}")
    return 0


def _infer_unet_config(student: dict) -> UNetConfig:
    depth = 0
    while f"enc{depth}.conv1.w" in student:
        depth += 1
    w0 = student["enc0.conv1.w"]
    return UNetConfig(depth=depth, base_channels=w0.shape[0],
                      in_channels=w0.shape[1])


def cmd_eval(args) -> int:
    ckpt = vtrainer.load_checkpoint(args.checkpoint)
    cfg = _infer_unet_config(ckpt.student)
    pair = vtrainer.restore_pair(ckpt, cfg)
    raw = vdata.load_dataset(args.data)
    if args.size:
        dataset = [vdata.resize_normalize(img, lbl, args.size)
                   for img, lbl in raw]
    else:
        dataset = raw
    ev = vtrainer.evaluate(pair, dataset, use_teacher=not args.student)
    _write_metrics_csv(args.out, ev.rows, ev.aggregate)
    print(f"wrote {args.out}")
    return 0


_REPORT_ORDER = ["source-only", "st-cr", "vm-cr", "target-only"]
_REPORT_NAMES = {"source-only": "Source-only", "st-cr": "ST-CR",
                 "vm-cr": "VM-CR", "target-only": "Target-only"}


def cmd_report(args) -> int:
    runs = []
    for run_dir in args.run_dirs:
        info = parse_kv_file(os.path.join(run_dir, "run_info.txt"))
        metrics_path = os.path.join(run_dir, "metrics.csv")
        agg = None
        for line in open(metrics_path).read().splitlines()[1:]:
            parts = line.split(",")
            if parts[0] == "aggregate":
                agg = [float(p) * 100 if p else None for p in parts[1:5]]
        if agg is None:
            raise DataError(f"{metrics_path}: no aggregate row")
        runs.append((info.get("mode", "?"), agg))
    runs.sort(key=lambda r: _REPORT_ORDER.index(r[0])
              if r[0] in _REPORT_ORDER else 99)
    lines = ["| Method | F1 | Acc | Sen | Sp |",
             "|---|---|---|---|---|"]
    for mode, agg in runs:
        cells = ["--" if v is None else f"{v:.1f}" for v in agg]
        lines.append(f"| {_REPORT_NAMES.get(mode, mode)} | " +
                     " | ".join(cells) + " |")
    table = "\n".join(lines)
    if args.out:
        with open(args.out, "w") as f:
            f.write(table + "\n")
    print(table)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vmcr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    g.add_argument("--op", help="restrict to one op")
    g.add_argument("--seeds", type=int, default=10)
    g.set_defaults(func=cmd_gradcheck)

    m = sub.add_parser("gen-mask", help="write a guidance mask PNG")
    m.add_argument("--h", dest="height", type=int, required=True)
    m.add_argument("--w", dest="width", type=int, required=True)
    m.add_argument("--sigma", type=float, required=True)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_gen_mask)

    d = sub.add_parser("gen-data", help="write synthetic image+label pairs")
    d.add_argument("--domain", required=True, help="domain config file")
    d.add_argument("--n", type=int, required=True)
    d.add_argument("--size", type=int, default=64)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out-dir", required=True)
    d.add_argument("--force", action="store_true")
    d.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run one training mode")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--mode", choices=vtrainer.MODES)
    t.add_argument("--iterations", type=int)
    t.add_argument("--size", type=int)
    t.add_argument("--sigma", type=float)
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset dir")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--size", type=int)
    e.add_argument("--student", action="store_true",
                   help="evaluate the student instead of the teacher")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="collate runs into a markdown table")
    r.add_argument("run_dirs", nargs="+")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except EmptyEvalError as e:
        print(f"error: no scoreable pixels: {e}", file=sys.stderr)
        return 3
    except VmcrError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
