"""
Bootstrap particle filter against the Kalman filter
===================================================

On the linear Gaussian model the Kalman filter is exact, so a particle
filter with the true model should match its RMSE, and the mean of its
likelihood estimates should match the exact evidence.
"""

import numpy as np

from oldpf import pf, ssm
from oldpf.oracle import kalman_filter

params = ssm.lgssm_params("pretrain", 2)
model = params.as_filter_model()
cfg = pf.FilterConfig(1000, -np.ones(2), np.ones(2))

for seed in range(3):
    tr = ssm.lgssm_simulate(params, 50, np.random.default_rng(seed))
    kf = kalman_filter(params, tr.observations)
    rng = np.random.default_rng(100 + seed)
    res = pf.run_filter(model, tr.observations, cfg, rng, init_states=rng.standard_normal((1000, 2)))
    rmse_pf = np.sqrt(np.mean(np.sum((res.estimates - tr.states[1:]) ** 2, axis=1)))
    rmse_kf = np.sqrt(np.mean(np.sum((kf.means - tr.states[1:]) ** 2, axis=1)))
    print(f"seed {seed}: PF rmse {rmse_pf:.4f}  KF rmse {rmse_kf:.4f}  resampled {res.resampled.sum()} of 50 steps")

# unbiased evidence: average p_hat over many short runs, all in one batch
tr = ssm.lgssm_simulate(params, 5, np.random.default_rng(11))
rng = np.random.default_rng(12)
runs = 10_000
res = pf.run_filter(model, np.broadcast_to(tr.observations, (runs, 5, 2)),
                    pf.FilterConfig(100, -np.ones(2), np.ones(2)), rng,
                    init_states=rng.standard_normal((runs, 100, 2)))
log_z = kalman_filter(params, tr.observations).log_evidence
print("mean p_hat / p:", np.mean(np.exp(res.log_evidence - log_z)))
# Jensen: the log of the estimate is biased low
print("mean log p_hat - log p:", np.mean(res.log_evidence) - log_z)
