"""
From coefficients to embeddings, and why the bounds matter
==========================================================

The per-descriptor embedding stacks one block per anchor: the coefficient,
the scaled residual, and the flattened upper triangle of the residual outer
product.  With a one-hot coefficient vector it collapses to the classical
hard-assignment embeddings.  The two approximation-error bounds explain the
variants' names: the tight bound is what the iterative coder minimizes, the
relaxed one admits the closed form — and the relaxed bound is never smaller.
"""

import numpy as np

from faemb.coding import CodingModel, ffaemb_gamma
from faemb.embed import (
    BoundInputs,
    bound_faemb,
    bound_ffaemb,
    embed_faemb,
    embed_vlad,
    embed_vlat,
    embedding_length,
    taylor_approx_error,
)

rng = np.random.default_rng(21)
d, n = 5, 3
C = rng.normal(size=(d, n))
model = CodingModel(anchors=C, mu=1e-2, variant="ffaemb")
x = rng.normal(size=d)

# ----------------------------------------------------------------------
# Embedding length: n blocks of d*(d+1)/2 each.
L = embedding_length(n, d)
print(f"embedding length for n={n}, d={d}: {L} (= {n} * {d * (d + 1) // 2})")

phi = embed_faemb(x, ffaemb_gamma(x, model), model)
print("soft-assignment embedding, first block:", np.round(phi[: d * (d + 1) // 2], 3))

# One-hot coefficients at the nearest anchor reproduce the hard-assignment
# outer-product embedding bit for bit.
nearest = int(np.argmin(((x[:, None] - C) ** 2).sum(axis=0)))
onehot = np.zeros(n)
onehot[nearest] = 1.0
print("one-hot == vlat:", np.array_equal(embed_faemb(x, onehot, model), embed_vlat(x, C)))
print("vlad residual:   ", np.round(embed_vlad(x, C)[nearest * d : (nearest + 1) * d], 3))

# ----------------------------------------------------------------------
# Bound ordering on random feasible coefficients.
worst = -np.inf
for _ in range(500):
    g = rng.normal(size=n)
    g += (1.0 - g.sum()) / n
    tight = bound_faemb(x, g, model, M=6.0)
    relaxed = bound_ffaemb(x, g, model, M=6.0)
    worst = max(worst, tight - relaxed)
print(f"max(tight - relaxed) over 500 draws: {worst:.3e}  (never positive)")

# ----------------------------------------------------------------------
# The bound is a real guarantee: for f(z) = sum(sin(z_i)) the third
# derivative is bounded by 1, so the order-2 approximation error built from
# any feasible coefficients stays under the computable bound.
harness = BoundInputs(
    value=lambda z: float(np.sin(z).sum()),
    gradient=np.cos,
    hessian=lambda z: np.diag(-np.sin(z)),
    M=1.0,
    k=2,
)
ratios = []
for _ in range(200):
    xx = rng.uniform(-2, 2, size=d)
    g = rng.normal(size=n)
    g += (1.0 - g.sum()) / n
    e, b = taylor_approx_error(harness, xx, g, model)
    ratios.append(e / b)
print(f"sin harness over 200 draws: worst error/bound ratio {max(ratios):.3f} "
      f"(a ratio above 1 would violate the guarantee)")
