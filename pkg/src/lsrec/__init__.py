"""lsrec: long-sequence sequential recommendation at desk scale.

Sliding-window epoch scheduling (control / all-sliding / mixed / strided),
k-shift hashed embeddings for large vocabularies, a small causal transformer
next-item model with hand-written gradients, and runtime-aware metric
reporting.
"""

__version__ = "0.1.0"
