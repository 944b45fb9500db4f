"""Check the loss-difference line integral on lenet-small and watch the endpoint approximation tighten.

Run: python demos/lemma_check.py
"""

from selectenc.dataio import synth_images
from selectenc.lemma import convergence_slope, verify_integral, verify_lemma_approx
from selectenc.models import build, lenet_small, onehot

params = build(lenet_small((16, 16, 3), 10), seed=0)
img = synth_images(1, seed=3, classes=10, shape=(16, 16, 3))[0]
x, y = img.pixels, onehot(img.label, 10)

for panels in (8, 32, 128, 256):
    r = verify_integral(params, x, y, panels)
    print(f"{panels:4d} panels: exact {r.exact_lhs:+.12f}  simpson {r.quadrature_rhs:+.12f}  gap {r.abs_gap_quadrature:.2e}")
print(f"log-log slope over 8/32/128 panels: {convergence_slope(params, x, y):.2f}")

for scale in (1.0, 0.1, 0.01):
    r = verify_lemma_approx(params, x, y, scale)
    print(f"theta x {scale:<5}: endpoint gap {r.abs_gap_endpoint:.3e}")
