"""
Sliding-window loss and its gradient
====================================

The window loss is minus the summed log ratios of weight totals. With
resampling off and the base noise fixed it is a smooth function of every
parameter, so reverse-mode gradients can be compared with central
differences.
"""

import numpy as np

from oldpf import autodiff as ad
from oldpf import learn, pf, ssm
from oldpf.flows import FlowArch, FlowModel
from oldpf.oracle import finite_diff_grad

rng = np.random.default_rng(0)
params = ssm.lgssm_params("pretrain", 2)
tr = ssm.lgssm_simulate(params, 3, rng)
model = FlowModel(2, 2, arch=FlowArch(hidden=8), seed=0)
for name in model.store.names():
    model.store.values[name] += 0.1 * rng.standard_normal(model.store.values[name].shape)

init = rng.standard_normal((10, 2))
noises = [rng.standard_normal((10, 2)) for _ in range(3)]
fcfg = pf.FilterConfig(10, -np.ones(2), np.ones(2), resample=False)

loss, _ = learn.filtering_loss(model, tr.observations, fcfg, None, init, noises)
print("window loss:", loss.value)
model.store.zero_grad()
ad.backward(loss, model.store)


def value(_):
    with ad.frozen(model.store):
        return learn.filtering_loss(model, tr.observations, fcfg, None, init, noises)[0].value


fd = finite_diff_grad(value, model.store, step=1e-6)
for name in ("dyn.A", "dyn.log_var", "prop.base.W1", "meas.flow.loc.net.W1"):
    g = model.store.grads[name]
    err = np.abs(g - fd[name]).max() / max(np.abs(fd[name]).max(), 1e-12)
    print(f"{name:<24} max|grad| {np.abs(g).max():.3e}  relative error {err:.1e}")
