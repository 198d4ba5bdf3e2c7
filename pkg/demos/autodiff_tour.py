"""A short walk through the tape-based autodiff used by the network.

Run with ``python demos/autodiff_tour.py``.
"""

import numpy as np

from c2ftcn import seqgrad as sg
from c2ftcn.seqgrad import Tensor

rng = np.random.default_rng(0)

# Sequences are (T, C) arrays: time along rows, channels along columns.
x = Tensor(rng.normal(size=(12, 3)))
w = Tensor(rng.normal(size=(4, 3, 3)) * 0.5, requires_grad=True)   # (Cout, Cin, k)
b = Tensor(np.zeros(4), requires_grad=True)

h = sg.relu(sg.conv1d(x, w, b))       # length kept at 12
pooled = sg.maxpool1d(h, 2)           # 12 -> 6
back = sg.upsample_linear(pooled, 12)  # stretched back, endpoints aligned
p = sg.softmax_rows(back)
print("shapes:", h.shape, pooled.shape, back.shape, p.shape)
print("rows sum to one:", np.allclose(p.data.sum(axis=1), 1.0))

# A scalar loss: mean negative log-probability of class 0.
loss = sg.mean(sg.take(sg.log(p), (slice(None), 0)))
loss = sg.mul(loss, -1.0)
loss.backward()
print("loss %.4f, |dL/dw| = %.4f" % (loss.data, np.linalg.norm(w.grad)))


# Central differences agree with the tape.
def objective():
    q = sg.softmax_rows(sg.upsample_linear(sg.maxpool1d(sg.relu(sg.conv1d(x, w, b)), 2), 12))
    return sg.mul(sg.mean(sg.take(sg.log(q), (slice(None), 0))), -1.0)


res = sg.grad_check(objective, [w, b])
print("finite-difference check: max relative error %.2e over %d entries" % (res.max_rel_error, res.n_checked))

# Upsampling keeps constants exact, which matters when probabilities are stretched.
const = np.full((5, 2), 0.3)
print("constant survives upsampling:", np.all(sg.interpolate(const, 17) == 0.3))
