"""Check the hand-written backward pass and evaluate both contrastive losses on toy inputs.

    python demos/02_gradients_and_losses.py
"""
import numpy as np

from microcl import autodiff as ad
from microcl.contrastive import supervised_loss, unsupervised_loss_from_embeddings
from microcl.networks import build_extractor

# %% finite differences against backward, float64, in eval mode (running BN stats)
net = build_extractor(3, base_channels=2, z_dim=6)
params = ad.cast_params(ad.init_params(net, seed=0), np.float64)
x = np.random.default_rng(0).uniform(0, 1, size=(2, 3, 32, 32))


def loss_fn(z):
    return 0.5 * float((z ** 2).sum()), z


report = ad.grad_check(net, params, loss_fn, x, n_samples=8)
# a conv bias that feeds batchnorm is cancelled by the batch mean: its true
# gradient is exactly zero and the differences only see roundoff
out, tape = ad.forward(net, params, x, record=True)
_, grads = ad.backward(tape, loss_fn(out)[1])
pre_bn = {k for k in report.errors if k.endswith(".bias") and f"{k.split('.')[0]}_bn.weight" in params}
for key, err in report.errors.items():
    note = f"analytic max |g| = {np.abs(grads[key]).max():.1e}" if key in pre_bn else ""
    print(f"{key:18s} rel err {err:.2e}  {note}")
checked = [k for k in report.errors if k not in pre_bn]
print("passed" if all(report.errors[k] < report.tol for k in checked) else "failed")

# %% the supervised cross-domain loss: micro queries vs macro keys and back
v_t = ad.l2_normalize(np.array([[1.0, 0.2], [0.1, 1.0], [0.9, -0.3]]))[0]
v_a = ad.l2_normalize(np.array([[1.0, 0.0], [0.0, 1.0], [0.2, 1.0], [1.0, 0.1]]))[0]
res = supervised_loss(v_t, np.array([0, 1, 0]), v_a, np.array([0, 1, 1, 0]), sigma=0.5)
print("J_S", res.loss, "per query", np.round(res.per_query, 3))

# %% the unsupervised loss: one positive from the momentum network, negatives from the queue
queue = ad.l2_normalize(np.random.default_rng(1).normal(size=(16, 2)))[0]
for sigma in (1.0, 0.5, 0.1):
    j_u, _, _ = unsupervised_loss_from_embeddings(v_t, v_t, queue, sigma)
    print(f"J_U at sigma={sigma}: {j_u:.4f}")
