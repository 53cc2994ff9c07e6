"""Multi-vehicle navigation toolkit: optimisation-based control labels,
attention-GNN imitation and closed-loop evaluation."""

__version__ = "0.1.0"
