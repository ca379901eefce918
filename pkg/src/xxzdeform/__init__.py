"""Twisted XXZ chain toolkit: conserved charges, integrable long-range
deformations, and asymptotic Bethe ansatz checks."""

from .pauli import LocalKernel, canonicalize, kernel_to_matrix, random_kernel

__version__ = "0.1.0"

__all__ = ["LocalKernel", "canonicalize", "kernel_to_matrix", "random_kernel", "__version__"]
