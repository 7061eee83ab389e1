"""
Desk-scale sign-conditioned fundus vision-language model: training, dataset forge and evaluation.
"""

__all__ = ["__version__"]
__version__ = "0.1.0"
