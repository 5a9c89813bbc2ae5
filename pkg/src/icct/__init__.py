"""Interpretable continuous control trees.

Differentiable decision trees whose nodes and leaf-controller selections
are crisp in the forward pass and trained through straight-through
gradients, plus a SAC trainer, desk-scale environments, a linear-time
verifier and exporters.
"""
from .estimators import ICCTAgent, ICCTRegressor
from .export import load, render_dot, render_paragraph, render_simple_text, save
from .model import IcctConfig, IcctModel, act, count_params, count_trainable, post_hoc_crispify, to_simple_form
from .sac import SacConfig, evaluate, train
from .verify import min_adversarial_perturbation, verify_output_range

__version__ = "0.1.0"

__all__ = [
    "ICCTAgent",
    "ICCTRegressor",
    "IcctConfig",
    "IcctModel",
    "SacConfig",
    "act",
    "count_params",
    "count_trainable",
    "evaluate",
    "load",
    "min_adversarial_perturbation",
    "post_hoc_crispify",
    "render_dot",
    "render_paragraph",
    "render_simple_text",
    "save",
    "to_simple_form",
    "train",
    "verify_output_range",
]
