"""
Renyi divergences in closed form
================================

Gaussian, inverse-gamma and Polya-Gamma pairs, checked against quadrature.
"""

import numpy as np

from occp.divergence import GaussianDist, InvGammaDist, PolyaGammaDist, renyi_gaussian, renyi_invgamma, renyi_polya_gamma
from occp.oracles import pg_oracle

# two 1-d Gaussians; the divergence grows with the order alpha
q = GaussianDist(np.array([1.0]), np.array([[0.8]]))  # second argument is a Cholesky factor
p = GaussianDist(np.array([0.0]), np.array([[2.0]]))
for alpha in (0.05, 0.5, 0.999, 1.0, 2.5):
    print(f"gaussian  alpha={alpha:<5} D={renyi_gaussian(q, p, alpha):.6f}")

# inverse-gamma noise variances
print("inv-gamma KL", renyi_invgamma(InvGammaDist(3.0, 2.0), InvGammaDist(0.1, 0.1), 1.0))

# a tilted Polya-Gamma against its untilted base: closed form vs numerical integral
d = PolyaGammaDist(2.0, 1.5)
for alpha in (0.5, 2.5):
    print(f"PG(2, 1.5) alpha={alpha}: closed {renyi_polya_gamma(d, alpha):.10f}  quadrature {pg_oracle(d, alpha):.10f}")
