"""Model-heterogeneous federated learning with orthogonal-projection feature distillation."""

__version__ = "0.1.0"
