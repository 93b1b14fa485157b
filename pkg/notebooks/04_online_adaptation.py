"""
Online adaptation under distribution shift (linear Gaussian)
============================================================

Pretrains on data from one parameter setting, then filters a long stream
from a shifted setting three ways: frozen, learning online from
observations only, and learning online from ground truth. This is a
reduced version of ``oldpf reproduce-paper``; expect a few minutes.
"""

import tempfile

from oldpf import experiment as ex

cfg = ex.ExperimentConfig.desk("lgssm", pretrain_epochs=10, online_T=1000, seeds=[0, 1, 2])
out = tempfile.mkdtemp(prefix="oldpf_lgssm_")
summary = ex.run_experiment(cfg, out)
print(summary.table(f"outputs in {out}"))

# per-step error averaged over seeds, in blocks of 100 steps
for m in cfg.methods:
    blocks = summary.curve_mean[m].reshape(-1, 100).mean(axis=1)
    print(f"{ex.METHOD_LABELS[m]:<20}", " ".join(f"{b:5.2f}" for b in blocks))
print(ex.ordering_report(summary))
