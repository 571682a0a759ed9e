"""Weak optimal-transport costs, coupling coefficients, and inequality checkers.

The package computes exact weighted transport costs on finite spaces
(classical Wasserstein and the weighted "weak" variant with certified
lower/upper bounds), builds coupling-coefficient matrices for dependent
path measures, simulates classical dependent processes, and verifies the
resulting exponential and oracle inequalities numerically.
"""

from weaktransport.measures import (
    DiscreteMeasure,
    DiscreteSpace,
    DomainError,
    MetricSpec,
    PathMeasure,
    chain_from_start,
    euclidean_metric,
    hamming_metric,
    kl_divergence,
    random_measure,
)
from weaktransport.report import ExperimentReport
from weaktransport.transport import (
    AlphaWeights,
    CertifiedValue,
    Coupling,
    MarkovCoupling,
    dual_form_check,
    glue_markov,
    inf_convolution,
    wasserstein,
    weak_cost_fixed_alpha,
    weak_transport_cost,
)

__all__ = [
    "DiscreteSpace",
    "DiscreteMeasure",
    "MetricSpec",
    "PathMeasure",
    "DomainError",
    "ExperimentReport",
    "kl_divergence",
    "random_measure",
    "chain_from_start",
    "hamming_metric",
    "euclidean_metric",
    "AlphaWeights",
    "CertifiedValue",
    "Coupling",
    "MarkovCoupling",
    "wasserstein",
    "weak_cost_fixed_alpha",
    "weak_transport_cost",
    "glue_markov",
    "inf_convolution",
    "dual_form_check",
]

__version__ = "0.1.0"
