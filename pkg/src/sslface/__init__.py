"""Low-resolution face verification with successive subspace learning.

A small, one-pass-trainable verification/identification toolkit: a
three-level channel-wise Saab transform tree per color representation,
pairwise similarity features over facial regions, a logistic classifier
ensemble, and pool-based active labeling with a companion annotation
service.
"""

__version__ = "0.1.0"
