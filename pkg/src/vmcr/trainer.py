"""Mean-teacher training loop: supervised step on labeled source batches,
a consistency step on unlabeled target batches (vessel-mixing or the
spatial-transform baseline), Adam update, EMA teacher update."""

from __future__ import annotations

import hashlib
import json
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import model as unet
from .autodiff import Adam, Tensor, _sigmoid, no_grad
from .data import Batch, LabelMap, batcher
from .errors import ConfigError, DataError, NumericsError
from .losses import (LossConfig, LossReport, adaptive_lambda, consistency_loss,
                     ema_update, mse_to_target, supervised_loss, total_loss)
from .metrics import ConfusionCounts, MetricsRow, classify_pixels, compute_metrics
from .model import ModelPair, UNetConfig, forward
from .perturb import (SpatialTransform, apply_spatial, apply_spatial_to_prediction,
                      gen_mask, mix_images, random_spatial)

MODES = ("source-only", "target-only", "st-cr", "vm-cr")

# rng stream tags, so every random draw depends only on (seed, stream, iteration)
_STREAM_AUG = 101
_STREAM_MASK = 202
_STREAM_STCR = 303


@dataclass
class TrainConfig:
    mode: str = "vm-cr"
    iterations: int = 2000
    batch_size: int = 2
    image_size: int = 64
    eval_every: int = 200
    seed: int = 0
    lr: float = 1e-3
    mask_sigma: float | None = None  # None -> image_size / 8
    augment_target: bool = False
    loss: LossConfig = field(default_factory=LossConfig)
    unet: UNetConfig = field(default_factory=UNetConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.iterations <= 0:
            raise ConfigError("iterations must be > 0")
        if self.batch_size <= 0:
            raise ConfigError("batch_size must be > 0")
        if self.mode == "vm-cr" and self.batch_size % 2:
            raise ConfigError("vm-cr mixes target images in pairs; "
                              "batch_size must be even")
        div = 2 ** self.unet.depth
        if self.image_size % div:
            raise ConfigError(f"image_size {self.image_size} not divisible "
                              f"by 2^depth={div}")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")

    @property
    def sigma(self) -> float:
        return self.image_size / 8.0 if self.mask_sigma is None else self.mask_sigma

    def digest(self) -> bytes:
        return hashlib.sha256(repr(self).encode()).digest()


@dataclass
class LogRow:
    iteration: int
    report: LossReport
    wall_time: float


@dataclass
class Checkpoint:
    student: dict[str, np.ndarray]
    teacher: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    adam_t: int
    iteration: int
    config_digest: bytes


@dataclass
class TrainResult:
    pair: ModelPair
    checkpoint: Checkpoint
    log: list[LogRow]
    best_teacher: dict[str, np.ndarray] | None = None
    best_f1: float | None = None
    best_iteration: int | None = None


@dataclass
class EvalResult:
    rows: list[MetricsRow]          # per image
    aggregate: MetricsRow           # pooled pixel counts (micro-average)
    counts: ConfusionCounts
    macro: MetricsRow | None = None


def _augment_sample(image: np.ndarray, labels: LabelMap,
                    rng: np.random.Generator):
    t = random_spatial(rng, include_scale=True)
    img = apply_spatial(image, t)
    stack = apply_spatial_to_prediction(labels.stacked(), t)
    return img, stack


def _teacher_posteriors(pair: ModelPair, images: np.ndarray) -> np.ndarray:
    with no_grad():
        logits = forward(pair.teacher, images.astype(np.float32),
                         pair.config, with_grad=False)
    return _sigmoid(logits.data)


def _consistency_term(cfg: TrainConfig, pair: ModelPair, batch: Batch,
                      it: int):
    """Returns (r_c Tensor or None, lambda, teacher confidence)."""
    if cfg.mode in ("source-only", "target-only"):
        return None, 0.0, 0.0
    xt = batch.target_images.astype(np.float32)
    teacher_post = _teacher_posteriors(pair, xt)
    conf = adaptive_lambda(teacher_post, cfg.loss.confidence_threshold,
                           1.0, cfg.loss.two_sided_confidence)
    lam = conf * cfg.loss.lambda_scale

    if cfg.mode == "vm-cr":
        h, w = xt.shape[-2:]
        mixed, targets = [], []
        for pidx in range(0, xt.shape[0], 2):
            mask_rng = np.random.default_rng([cfg.seed, _STREAM_MASK, it, pidx])
            mask = gen_mask(h, w, cfg.sigma, mask_rng.integers(2 ** 32))
            mixed.append(mix_images(xt[pidx], xt[pidx + 1], mask))
            targets.append(mix_images(teacher_post[pidx],
                                      teacher_post[pidx + 1], mask))
        student_logits = forward(pair.student, np.stack(mixed), pair.config)
        r_c = mse_to_target(student_logits, np.stack(targets))
    else:  # st-cr: exactly invertible transforms only
        rng = np.random.default_rng([cfg.seed, _STREAM_STCR, it])
        perturbed, targets = [], []
        for i in range(xt.shape[0]):
            t = random_spatial(rng, include_scale=False)
            perturbed.append(apply_spatial(xt[i], t))
            targets.append(apply_spatial_to_prediction(teacher_post[i], t))
        student_logits = forward(pair.student, np.stack(perturbed), pair.config)
        r_c = mse_to_target(student_logits, np.stack(targets))
    return r_c, lam, conf


def train(cfg: TrainConfig, source_data: list, target_data: list,
          source_val: list | None = None,
          resume: Checkpoint | None = None) -> TrainResult:
    """Run the configured mode. For target-only, target_data must carry
    labels and serves as the supervised set (the oracle upper bound).

    Model selection (when source_val is given) uses labeled-domain
    validation F1 only; target labels never influence selection."""
    labeled = target_data if cfg.mode == "target-only" else source_data
    if cfg.mode == "target-only" and (not target_data or
                                      not isinstance(target_data[0], tuple)):
        raise DataError("target-only mode needs labeled target data")

    pair = unet.build(cfg.unet, cfg.seed)
    opt = Adam(pair.student, lr=cfg.lr)
    start_it = 0
    if resume is not None:
        if resume.config_digest != cfg.digest():
            raise ConfigError("checkpoint config digest mismatch")
        for name, p in pair.student.items():
            p.data[...] = resume.student[name]
        for name, p in pair.teacher.items():
            p.data[...] = resume.teacher[name]
        for name in opt.m:
            opt.m[name][...] = resume.adam_m[name]
            opt.v[name][...] = resume.adam_v[name]
        opt.t = resume.adam_t
        start_it = resume.iteration

    batches = batcher(labeled, target_data, cfg.batch_size, cfg.seed,
                      pair_target=(cfg.mode == "vm-cr"))
    for _ in range(start_it):
        next(batches)  # replay consumed batches so resume is trajectory-exact

    log: list[LogRow] = []
    best_f1 = None
    best_teacher = None
    best_it = None
    t0 = time.perf_counter()

    for it in range(start_it, cfg.iterations):
        batch = next(batches)
        aug_rng = np.random.default_rng([cfg.seed, _STREAM_AUG, it])
        imgs, stacks = [], []
        for img, lbl in zip(batch.source_images, batch.source_labels):
            a_img, a_stack = _augment_sample(img, lbl, aug_rng)
            imgs.append(a_img)
            stacks.append(a_stack)
        x_s = np.stack(imgs).astype(np.float32)
        y_s = np.stack(stacks)

        try:
            logits = forward(pair.student, x_s, pair.config)
            l_s = supervised_loss(logits, y_s, cfg.loss.pos_weight)
            r_c, lam, conf = _consistency_term(cfg, pair, batch, it)
            total, report = total_loss(l_s, r_c, lam, conf)
            opt.zero_grad()
            total.backward()
            opt.step()
        except NumericsError as e:
            raise NumericsError(
                f"non-finite value at iteration {it} (seed {cfg.seed}, "
                f"source ids {batch.source_ids}, target ids "
                f"{batch.target_ids}): {e}") from e
        ema_update(pair.student, pair.teacher, cfg.loss.ema_alpha)
        log.append(LogRow(it, report, time.perf_counter() - t0))

        if source_val and ((it + 1) % cfg.eval_every == 0
                           or it + 1 == cfg.iterations):
            res = evaluate(pair, source_val, use_teacher=True)
            f1 = res.aggregate.f1
            if f1 is not None and (best_f1 is None or f1 > best_f1):
                best_f1 = f1
                best_it = it + 1
                best_teacher = {k: p.data.copy() for k, p in pair.teacher.items()}

    ckpt = Checkpoint(
        student={k: p.data.copy() for k, p in pair.student.items()},
        teacher={k: p.data.copy() for k, p in pair.teacher.items()},
        adam_m={k: v.copy() for k, v in opt.m.items()},
        adam_v={k: v.copy() for k, v in opt.v.items()},
        adam_t=opt.t,
        iteration=cfg.iterations,
        config_digest=cfg.digest(),
    )
    return TrainResult(pair=pair, checkpoint=ckpt, log=log,
                       best_teacher=best_teacher, best_f1=best_f1,
                       best_iteration=best_it)


def evaluate(pair: ModelPair, dataset: list, use_teacher: bool = True,
             macro: bool = False) -> EvalResult:
    """Teacher-only (by default) clean-input evaluation; metrics pooled over
    pixel counts across the set, per-image rows included."""
    if not dataset:
        raise DataError("empty dataset")
    params = pair.teacher if use_teacher else pair.student
    rows = []
    pooled = ConfusionCounts()
    per_image_counts = []
    for img, labels in dataset:
        with no_grad():
            logits = forward(params, img[None].astype(np.float32),
                             pair.config, with_grad=False)
        post = _sigmoid(logits.data)[0]
        c = classify_pixels(post, labels)
        per_image_counts.append(c)
        pooled = pooled + c
        rows.append(compute_metrics(c) if c.total_counted else
                    MetricsRow(None, None, None, None))
    agg = compute_metrics(pooled, aggregate=True)
    macro_row = None
    if macro:
        defined = [r for r in rows if r.acc is not None]
        def avg(key):
            vals = [getattr(r, key) for r in defined if getattr(r, key) is not None]
            return sum(vals) / len(vals) if vals else None
        macro_row = MetricsRow(avg("f1"), avg("acc"), avg("sen"), avg("sp"),
                               aggregate=True)
    return EvalResult(rows=rows, aggregate=agg, counts=pooled, macro=macro_row)


# -- log / checkpoint serialization ------------------------------------------

LOG_HEADER = "iteration,L_S,R_C,lambda,total,teacher_confidence,wall_time"


def write_log_csv(path: str, log: list[LogRow]):
    with open(path, "w") as f:
        f.write(LOG_HEADER + "\n")
        for row in log:
            r = row.report
            rc = "" if r.consistency is None else f"{r.consistency:.8f}"
            f.write(f"{row.iteration},{r.supervised:.8f},{rc},{r.lam:.8f},"
                    f"{r.total:.8f},{r.teacher_confidence:.8f},"
                    f"{row.wall_time:.3f}\n")


_MAGIC = b"VMCR"
_VERSION = 1


def save_checkpoint(path: str, ckpt: Checkpoint):
    """Binary layout: magic 'VMCR', u16 LE version, 32-byte config digest,
    u32 LE manifest length, JSON manifest (names/shapes + counters), then
    the arrays as little-endian float32 in manifest order."""
    arrays = {}
    for prefix, group in (("student", ckpt.student), ("teacher", ckpt.teacher),
                          ("adam.m", ckpt.adam_m), ("adam.v", ckpt.adam_v)):
        for name, arr in group.items():
            arrays[f"{prefix}.{name}"] = np.ascontiguousarray(arr, dtype="<f4")
    manifest = {
        "iteration": ckpt.iteration,
        "adam_t": ckpt.adam_t,
        "arrays": [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()],
    }
    blob = json.dumps(manifest).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<H", _VERSION))
        f.write(ckpt.config_digest)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for v in arrays.values():
            f.write(v.tobytes())


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC:
            raise DataError(f"{path}: bad magic, not a checkpoint")
        (version,) = struct.unpack("<H", f.read(2))
        if version != _VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        digest = f.read(32)
        (mlen,) = struct.unpack("<I", f.read(4))
        manifest = json.loads(f.read(mlen).decode())
        groups = {"student": {}, "teacher": {}, "adam.m": {}, "adam.v": {}}
        for entry in manifest["arrays"]:
            shape = tuple(entry["shape"])
            n = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(f.read(4 * n), dtype="<f4").reshape(shape).copy()
            full = entry["name"]
            for prefix in groups:
                if full.startswith(prefix + "."):
                    groups[prefix][full[len(prefix) + 1:]] = arr
                    break
    return Checkpoint(
        student=groups["student"], teacher=groups["teacher"],
        adam_m=groups["adam.m"], adam_v=groups["adam.v"],
        adam_t=manifest["adam_t"], iteration=manifest["iteration"],
        config_digest=digest,
    )


def restore_pair(ckpt: Checkpoint, cfg: UNetConfig,
                 use_best: dict[str, np.ndarray] | None = None) -> ModelPair:
    pair = unet.build(cfg, seed=0)
    for name, p in pair.student.items():
        p.data[...] = ckpt.student[name]
    teacher_src = use_best if use_best is not None else ckpt.teacher
    for name, p in pair.teacher.items():
        p.data[...] = teacher_src[name]
    return pair
