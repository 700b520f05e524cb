"""Importance-sampling SGD laboratory.

Non-uniform minibatch sampling schemes for small neural networks: scheme
construction and validation, exact convergence-speed formulas with
brute-force oracles, a scheme-quality metric, and desk-scale training
experiments on a two-class image task.
"""

__version__ = "0.1.0"
