"""Online-learning differentiable particle filters with normalising flows."""

from .autodiff import Mlp, Node, ParameterStore, ShapeError
from .flows import FlowArch, FlowModel, NonFiniteError
from .learn import (OnlineConfig, OnlineRunRecord, PretrainConfig, frozen_run, online_run, pretrain,
                    supervised_online_run)
from .oracle import kalman_filter
from .pf import FilterConfig, FilterDivergence, NonFiniteWeightError, run_filter
from .ssm import Trajectory, generate_dataset, lgssm_params, tracking_params

__all__ = [
    "Mlp", "Node", "ParameterStore", "ShapeError", "FlowArch", "FlowModel", "NonFiniteError", "OnlineConfig",
    "OnlineRunRecord", "PretrainConfig", "frozen_run", "online_run", "pretrain", "supervised_online_run",
    "kalman_filter", "FilterConfig", "FilterDivergence", "NonFiniteWeightError", "run_filter", "Trajectory",
    "generate_dataset", "lgssm_params", "tracking_params",
]
__version__ = "0.1.0"
