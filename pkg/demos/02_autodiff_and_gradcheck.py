"""
A tiny reverse-mode engine and its finite-difference check
==========================================================

Every model in the package is differentiated by a small tape-based engine.
Here it differentiates a masked attention step by hand and then checks each
term of the training loss against central differences.
"""
import numpy as np

from pix2map import autodiff as ad
from pix2map.encoders import FeatureEncoderConfig, GraphEncoderConfig, init_params
from pix2map.synthdata import gradcheck_batch
from pix2map.training import loss_gradient_errors, total_loss

rng = np.random.default_rng(0)

# scores of 4 tokens against each other, only some pairs admitted by the mask
x = ad.Tensor(rng.normal(size=(4, 3)), requires_grad=True)
mask = np.array([[1, 1, 0, 0], [1, 1, 1, 0], [0, 1, 1, 1], [0, 0, 1, 1]])
att = ad.masked_softmax_rows(ad.matmul(x, ad.transpose(x)), mask)
out = ad.sum_all(ad.mul(ad.matmul(att, x), rng.normal(size=(4, 3))))
out.backward()
print("d out / d x:\n", np.round(x.grad, 4))

f = lambda a: ad.sum_all(ad.mul(ad.matmul(ad.masked_softmax_rows(ad.matmul(a, ad.transpose(a)), mask), a), np.ones((4, 3))))
print("worst relative error of that rule set:", ad.gradient_check(f, [x.data]))

# the full loss on a random batch of 3 graph/feature pairs (float64)
gcfg = GraphEncoderConfig(layers=2, embed_dim=8, heads=2, max_nodes=8)
fcfg = FeatureEncoderConfig(input_dim=6, hidden_dims=(8,), embed_dim=8)
params = init_params(gcfg, fcfg, seed=1)
batch = gradcheck_batch(rng, 3, params)
print(total_loss(batch, params))
for term, err in loss_gradient_errors(batch, params).items():
    print(f"{term:12s} max relative error {err:.2e}")
