"""Desk-scale laboratory for prefix-conditioned trajectory prediction.

Pipeline: simulate power-system DAE trajectories (swing, exponential-recovery
load, switched-linear EMT), normalize them into model-ready records, train a
piecewise-linear latent-ODE transformer on them, adapt it with a
clustering-routed mixture of low-rank experts, and benchmark the linear
decoder's integration cost against a nonlinear-MLP baseline.
"""

__version__ = "0.1.0"
