"""Reconstruct one 8x8 grayscale image from its gradient, with and without selective encryption.

Run: python demos/attack_vs_defenses.py
"""

import numpy as np

from selectenc.attack import AttackConfig, invert
from selectenc.dataio import synth_images
from selectenc.encryption import BOUNDED_NOISE, attacker_view, top_s_mask
from selectenc.evalmetrics import quality
from selectenc.models import build, lenet_small, loss_and_grad, onehot
from selectenc.significance import compute

params = build(lenet_small((8, 8, 1), 10), seed=0)
img = synth_images(1, seed=1, classes=10, shape=(8, 8, 1))[0]
x0, y0 = img.pixels, onehot(img.label, 10)
_, g0 = loss_and_grad(params, x0, y0)
print(f"model has {params.m} parameters; true label {img.label}")

cfg = AttackConfig(iterations=1000, restarts=2, seed=0)
cases = [("none", 0.0), ("Grad", 0.3), ("ProdSig", 0.3), ("Param", 0.3)]
for metric, ratio in cases:
    scores = compute("Grad" if metric == "none" else metric, params, x0, y0, g0)
    mask = top_s_mask(scores, ratio)
    view = attacker_view(g0, mask, BOUNDED_NOISE, seed=0)
    r = invert(params, y0, view, cfg)
    q = quality(r.x_star, x0)
    print(f"{metric:>8} at {ratio:.0%}: mse {q.mse:.5f}  psnr {q.psnr:6.2f} dB  ssim {q.ssim:.3f}  "
          f"rec_loss {r.final_rec_loss:.2e}")

np.set_printoptions(precision=2, suppress=True)
print("ground truth, first row:", x0[0, :, 0])
