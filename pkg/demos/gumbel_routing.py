"""
Noisy Top-K routing
===================

During training the router adds Gumbel noise to its scores before taking
the top K, which makes every expert reachable. With equal scores and K=1
each expert wins about equally often; a score gap of log(4) makes one
expert about four times as likely as another.
"""

import numpy as np

from mot.numerics import Tensor
from mot.router import sample_gumbel, select_topk

g = sample_gumbel(100_000, seed=0)
print(f"Gumbel draws: mean {g.mean():.4f} (Euler gamma 0.5772), variance {g.var():.4f} (pi^2/6 = 1.6449)")

# %%
rng = np.random.default_rng(1)
for scores in ([0.0, 0.0, 0.0, 0.0], [np.log(4), 0.0, 0.0, 0.0]):
    wins = np.zeros(4)
    for _ in range(20_000):
        d = select_topk(Tensor(np.array(scores)), 1, noise=sample_gumbel(4, rng=rng))
        wins[d.primary[0]] += 1
    print("scores", np.round(scores, 3), "-> win share", np.round(wins / wins.sum(), 3),
          "softmax", np.round(np.exp(scores) / np.exp(scores).sum(), 3))

# %%
# K=2: the relaxed selection pi carries gradient back to the scores; the hard
# choice does not.
s = Tensor(np.array([1.0, 0.5, -0.5]), requires_grad=True)
d = select_topk(s, 2, noise=sample_gumbel(3, seed=3))
print("active", d.active[0], "primary", d.primary[0], "pi", np.round(d.pi.data[0], 3))
d.gates().sum().backward()
print("gradient of the summed gates w.r.t. the scores", np.round(s.grad, 3))
