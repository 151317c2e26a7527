"""
Treatment effects under hidden confounding
==========================================

Sparse GPs fit the large confounded sample; a small randomised sample then
estimates a linear correction eta (true value -1).
"""

import numpy as np

from occp.gp_confound import Stage1Config, fit_all_alphas, predict, simulate_kallus

data, truth = simulate_kallus(seed=7, n1=1000, n2=100)
fits = fit_all_alphas(data, (0.05, 0.999, 2.5), config=Stage1Config(M=10))

x = np.linspace(-1, 1, 5)[:, None]
for f in fits:
    eta_mean, eta_cov = f.state2.eta_marginal()
    pr = predict(f.state1, f.state2, data, x, n_draws=500, rng=0)
    print(f"alpha={f.alpha:<5} lambda1={f.lambda1:.4f} lambda2={f.lambda2:.3f} "
          f"eta={eta_mean[0]:.3f} (sd {np.sqrt(eta_cov[0, 0]):.3f})")
    print("   tau(x) fitted", np.round(pr["tau_mean"], 2), " true", np.round(truth["tau"](x[:, 0]), 2))
