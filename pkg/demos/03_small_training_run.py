"""Train a tiny model with vessel-mixing consistency and watch the losses.

Uses a 32x32 depth-2 network and a few hundred iterations so the whole
script finishes in about a minute on a laptop. The point is to see the
adaptive lambda wake up as the teacher becomes confident, not to reach a
good F1 -- see the README for the full experiment.
"""
from vmcr.data import DomainConfig, make_dataset
from vmcr.losses import LossConfig
from vmcr.model import UNetConfig
from vmcr.trainer import TrainConfig, evaluate, train

source = make_dataset(DomainConfig(intensity_gain=1.0, gamma=1.0),
                      12, 32, 32, seed=10)
target = make_dataset(DomainConfig(intensity_gain=0.6, gamma=1.8,
                                   noise_std=0.05),
                      12, 32, 32, seed=11)

cfg = TrainConfig(mode="vm-cr", iterations=300, image_size=32,
                  eval_every=100, seed=0,
                  unet=UNetConfig(depth=2, base_channels=8),
                  loss=LossConfig())

result = train(cfg, source, target)

print(f"{'iter':>5} {'L_S':>8} {'R_C':>8} {'lambda':>7} {'conf':>6}")
for row in result.log[::25]:
    r = row.report
    print(f"{row.iteration:>5} {r.supervised:>8.4f} {r.consistency:>8.4f} "
          f"{r.lam:>7.3f} {r.teacher_confidence:>6.3f}")

ev = evaluate(result.pair, target)
a = ev.aggregate
print(f"\ntarget-domain teacher after {cfg.iterations} iters: "
      f"F1 {a.f1:.3f}  Acc {a.acc:.3f}")
