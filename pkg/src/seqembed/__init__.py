"""Embedding learning on mixed identity/sequence data.

A small, self-contained training stack: deterministic numerics, an
IDX/synthetic data layer with identity/sequence splitting, a hand-rolled
convolutional embedding network, the joint chief + auxiliary loss family
(label-smoothed cross-entropy, angular-margin head, center loss, and the
discriminative sequence-agent loss), an SGD trainer, and evaluation tools.
"""

__version__ = "0.1.0"
