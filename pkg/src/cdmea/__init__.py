"""Multi-modal entity alignment with counterfactually debiased inference."""

__version__ = "0.1.0"
