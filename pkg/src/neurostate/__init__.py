"""State-aware EEG representation learning.

A hierarchical encoder (temporal convolutions, retrieval-based spatial
filtering against a fixed electrode template, patch tokenization, a
pre-norm transformer) trained with masked reconstruction through one
shared and several state-specific encoder branches, plus tooling for
downstream fine-tuning, evaluation metrics, synthetic data, and a CLI.
"""

__version__ = "0.1.0"
