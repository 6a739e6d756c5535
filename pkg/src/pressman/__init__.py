"""Differentiable reservoir pressure management.

Finite-volume single-phase and IMPES two-phase simulators with adjoint
gradients, a numpy CNN that maps permeability fields to an extraction rate,
and the training loop that couples them.
"""

__version__ = "0.1.0"
