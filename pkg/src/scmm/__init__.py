"""scmm: a weak-supervision label model for BIO sequence annotations.

Aggregates the noisy annotations of multiple labeling functions with a
conditional hidden Markov model whose emission matrices are built sparsely
from predicted per-LF reliability scores, refined by cross-LF disagreement
statistics, and sampled from a Dirichlet prior during training.
"""

__version__ = "0.1.0"
