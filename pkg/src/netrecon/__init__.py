"""Train small ReLU networks and reconstruct their training samples from the weights."""

__version__ = "0.1.0"
