"""Lipschitz bounds of GNN outputs and Jacobian-regularized (JacoLip) fair training."""

__version__ = "0.1.0"
