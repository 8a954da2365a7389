"""Desk-scale federated learning privacy laboratory.

Subpackages cover the full loop: a small float64 autodiff core, dataset
parsing and partitioning, a model zoo, federated training protocols,
pairwise-masking secure aggregation, neural mutual-information estimation,
closed-form leakage bounds, reconstruction/DP adversary tooling, and a CLI
that drives sweeps into deterministic CSV reports.
"""

__version__ = "0.1.0"
