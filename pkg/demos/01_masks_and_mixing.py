"""Generate guidance masks and mix two synthetic fundus images.

Walks through the perturbation pipeline step by step: sample two images
from different domains, draw a blurred-noise guidance mask, and blend them.
Writes PNGs into demos/out_masks/ so you can eyeball the result.
"""
import os

import numpy as np
from PIL import Image

from vmcr.data import DomainConfig, synth_sample
from vmcr.perturb import gen_mask, mix_images

OUT = os.path.join(os.path.dirname(__file__), "out_masks")
os.makedirs(OUT, exist_ok=True)


def save_rgb(name, chw):
    arr = (np.clip(chw, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(arr).save(os.path.join(OUT, name))


source = DomainConfig(intensity_gain=1.0, gamma=1.0)
target = DomainConfig(intensity_gain=0.6, gamma=1.8, noise_std=0.05)

img_a, _ = synth_sample(source, 96, 96, seed=3)
img_b, _ = synth_sample(target, 96, 96, seed=4)
save_rgb("domain_source.png", img_a)
save_rgb("domain_target.png", img_b)
print(f"source mean intensity {img_a.mean():.3f}, "
      f"target mean intensity {img_b.mean():.3f}")

# the mask is i.i.d. gaussian noise, blurred, thresholded at its mean --
# so roughly half the pixels come from each image, in smooth blobs whose
# size is controlled by sigma
for sigma in (4.0, 12.0, 24.0):
    mask = gen_mask(96, 96, sigma=sigma, seed=0)
    frac = mask.bits.mean()
    print(f"sigma={sigma:5.1f}  ones fraction {frac:.3f}")
    Image.fromarray(mask.bits * 255).save(
        os.path.join(OUT, f"mask_sigma{sigma:g}.png"))
    mixed = mix_images(img_a, img_b, mask)
    save_rgb(f"mixed_sigma{sigma:g}.png", mixed)

print(f"wrote images to {OUT}")
