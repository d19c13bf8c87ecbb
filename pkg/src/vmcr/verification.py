"""Finite-difference verification suite for every differentiable op and the
full tiny-U-Net loss. Shared by the CLI `gradcheck` subcommand and the test
suite."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import model as unet
from .autodiff import Tensor, gradcheck
from .losses import supervised_loss


def _rand(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True, dtype=np.float64)


def _case_add(rng):
    a, b = _rand(rng, 3, 4), _rand(rng, 3, 4)
    return lambda a, b: (a + b).mean(), [a, b]


def _case_sub(rng):
    a, b = _rand(rng, 3, 4), _rand(rng, 3, 4)
    return lambda a, b: (a - b * 0.5).mean(), [a, b]


def _case_mul(rng):
    a, b = _rand(rng, 3, 4), _rand(rng, 3, 4)
    return lambda a, b: (a * b).sum(), [a, b]


def _case_relu(rng):
    # keep values away from the kink at 0
    x = Tensor(rng.standard_normal((4, 5)) + np.sign(rng.standard_normal((4, 5))) * 0.2,
               requires_grad=True, dtype=np.float64)
    return lambda x: x.relu().sum(), [x]


def _case_sigmoid(rng):
    x = _rand(rng, 4, 5)
    return lambda x: (x.sigmoid() * x.sigmoid()).mean(), [x]


def _case_conv2d(rng):
    x = _rand(rng, 2, 3, 5, 5)
    w = _rand(rng, 4, 3, 3, 3)
    b = _rand(rng, 4)
    return lambda x, w, b: ad.conv2d(x, w, b, stride=1, pad=1).sum(), [x, w, b]


def _case_conv2d_strided(rng):
    x = _rand(rng, 1, 2, 6, 6)
    w = _rand(rng, 3, 2, 3, 3)
    b = _rand(rng, 3)
    return lambda x, w, b: (ad.conv2d(x, w, b, stride=2, pad=0)
                            * ad.conv2d(x, w, b, stride=2, pad=0)).mean(), [x, w, b]


def _case_maxpool2(rng):
    # distinct values so the argmax is stable under the fd step
    vals = rng.permutation(2 * 2 * 6 * 6).astype(np.float64)
    x = Tensor(vals.reshape(2, 2, 6, 6) * 0.1 + rng.standard_normal() * 0.01,
               requires_grad=True, dtype=np.float64)
    return lambda x: (ad.maxpool2(x) * ad.maxpool2(x)).mean(), [x]


def _case_upsample(rng):
    x = _rand(rng, 1, 3, 4, 4)
    return lambda x: (upmul(x)).sum(), [x]


def upmul(x):
    u = ad.upsample_nearest2(x)
    return (u * u).mean()


def _case_concat(rng):
    a = _rand(rng, 1, 2, 4, 4)
    b = _rand(rng, 1, 3, 4, 4)
    return lambda a, b: (ad.concat_channels(a, b)
                         * ad.concat_channels(a, b)).mean(), [a, b]


def _case_bce(rng):
    z = _rand(rng, 2, 2, 3, 3)
    y = (rng.random((2, 2, 3, 3)) < 0.3).astype(np.float64)
    return lambda z: ad.bce_with_logits(z, y, pos_weight=10.0).mean(), [z]


def _case_unet(rng, size=8, depth=2, base=2):
    cfg = unet.UNetConfig(depth=depth, base_channels=base)
    params = unet.init_params(cfg, seed=int(rng.integers(2 ** 31)),
                              dtype=np.float64)
    for p in params.values():  # biases included, nudged off zero
        p.data += rng.standard_normal(p.data.shape) * 0.05
    x = rng.random((1, 3, size, size))
    y = (rng.random((1, 2, size, size)) < 0.2).astype(np.float64)
    names = list(params)
    tensors = [params[n] for n in names]

    def f(*ps):
        logits = unet.forward(dict(zip(names, ps)), x, cfg)
        return supervised_loss(logits, y, pos_weight=10.0)

    return f, tensors


CASES = {
    "add": _case_add,
    "sub": _case_sub,
    "mul": _case_mul,
    "relu": _case_relu,
    "sigmoid": _case_sigmoid,
    "conv2d": _case_conv2d,
    "conv2d-strided": _case_conv2d_strided,
    "maxpool2": _case_maxpool2,
    "upsample": _case_upsample,
    "concat": _case_concat,
    "bce": _case_bce,
    "unet-loss": _case_unet,
}


@dataclass
class SuiteEntry:
    op: str
    seed: int
    max_rel_error: float
    passed: bool


def run_suite(ops: list[str] | None = None, seeds: int = 10,
              tol: float = 1e-4) -> list[SuiteEntry]:
    names = ops if ops is not None else list(CASES)
    results = []
    for name in names:
        if name not in CASES:
            raise KeyError(f"unknown op {name!r}; known: {sorted(CASES)}")
        for seed in range(seeds):
            rng = np.random.default_rng([7, seed])
            f, inputs = CASES[name](rng)
            rep = gradcheck(f, inputs)
            results.append(SuiteEntry(name, seed, rep.max_rel_error,
                                      rep.max_rel_error < tol))
    return results
