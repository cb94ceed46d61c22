"""Benchmark for separating aleatoric from epistemic uncertainty in small
stochastic classifiers (MC-Dropout, MC-DropConnect, Flipout, Deep Ensembles).
"""

__version__ = "0.1.0"

from .disentangle import UncertaintyTriple, gl_uncertainties, it_disentangle
from .metrics import disentanglement_error

__all__ = ["UncertaintyTriple", "disentanglement_error", "gl_uncertainties", "it_disentangle", "__version__"]
