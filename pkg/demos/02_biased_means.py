"""
Biased normal means
===================

A small reliable sample and a large biased one share a mean phi.  The cut
posterior keeps the biased sample from pulling phi; lower orders alpha widen it.
"""

import numpy as np

from occp.biased_means import PRIORS, calibrate, cut_posterior, fit_calibrated, simulate, true_joint_posterior

rng = np.random.default_rng(1)
data = simulate(rng, n1=20, n2=1000, phi=5.0, eta=5.0)
prior = PRIORS["objective"]

joint = true_joint_posterior(data, prior)
cut = cut_posterior(data, prior)
print("joint posterior  phi", joint.mu_phi, "sd", np.sqrt(joint.v_phi))
print("cut posterior    phi", cut.mu_phi, "sd", np.sqrt(cut.v_phi))

# learning rates are matched to the KL fit, then each order is solved
for alpha in (0.05, 0.5, 0.999, 5.0):
    rates = calibrate(data, prior, alpha)
    q = fit_calibrated(data, prior, alpha).q
    lo, hi = q.interval("phi")
    print(f"alpha={alpha:<5} lambda1={rates.lambda1:.3f}  phi {q.mu_phi:.3f} [{lo:.3f}, {hi:.3f}]  eta {q.mu_eta:.3f}")
