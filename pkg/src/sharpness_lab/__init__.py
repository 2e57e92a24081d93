"""Sharpness-aware training lab: SAM/ASAM optimizers, adaptive sharpness
measurement and rank-correlation analysis on small ReLU networks."""

from .analysis import BoundInputs, HyperGrid, MeasureGapPair, granulated_coefficients, kendall_tau, pac_bayes_penalty
from .autodiff import Graph, Tensor, finite_difference_gradient
from .models import ModelSpec, ParameterLayout, ParameterVector, apply_node_scaling, build_model, loss_and_grad
from .normops import PerturbationConfig, elementwise_T, filterwise_T
from .optim import asam_ascent, init_state, sam_ascent, two_step_update
from .sharpness import SharpnessReport, estimate_sharpness, m_sharpness_estimate

__version__ = "0.1.0"
