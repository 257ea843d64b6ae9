"""Anomaly-representation pretraining on pre-extracted patch features.

The package trains a learnable key/value attention projector on residual
features (patch feature minus nearest normal reference) with angle- and
norm-oriented contrastive losses, and evaluates the learned representation
with feature-norm, Gaussian/Mahalanobis and coreset-kNN scorers plus
AUROC/PRO metrics.
"""

__version__ = "0.1.0"
