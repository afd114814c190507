"""
Layer similarity with minibatch CKA
===================================

Linear CKA on toy activations, then a full layer-by-layer matrix between two
small transformers that only differ in their initialization seed.
"""

import numpy as np

from cptlab.analysis import cka_minibatch, cka_unbiased, layer_cka
from cptlab.core.rng import make_rng
from cptlab.models import ModelSpec, build

rng = make_rng(0, "demo")
x = rng.normal(size=(256, 12))
y = x @ rng.normal(size=(12, 8)) + 0.5 * rng.normal(size=(256, 8))

# identical activations score 1, whatever the batching
print("cka(x, x)      =", round(cka_minibatch(x, x, rng=make_rng(1)), 6))

# the unbiased full-batch value and its minibatch estimate
print("full batch     =", round(cka_unbiased(x, y), 4))
print("minibatch b=16 =", round(cka_minibatch(x, y, batch_size=16, passes=10, rng=make_rng(2)), 4))

# rotating or rescaling one side leaves the score alone
q, _ = np.linalg.qr(rng.normal(size=(12, 12)))
print("rotated x      =", round(cka_minibatch(3.0 * x @ q, y, batch_size=16, passes=10, rng=make_rng(2)), 4))

# layer matrix: rows are taps of model a, columns taps of model b
spec = ModelSpec(depth=3, width=16, heads=2, image_size=8, patch=4)
probe = rng.uniform(0, 1, (96, 8, 8, 3)).astype(np.float32)
mat = layer_cka(build(spec, 0), build(spec, 1), probe)
print()
print(mat.to_table([]))
