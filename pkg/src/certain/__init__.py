"""Uncertainty-aware multimodal classification with data-driven priors.

A small numpy/scipy library: synthetic paired-modality data, a fusion network
with hand-written gradients, mean-field variational fine-tuning under a
context-set regularizer, and selective-prediction evaluation.
"""
__version__ = "0.1.0"
