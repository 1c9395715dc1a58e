"""Paired signal/report representation learning at desk scale.

Pretrains a dual-branch encoder on synthetic 12-lead recordings paired with
token reports, using masked reconstruction, symmetric contrastive alignment,
their sum, or a cosine information-bottleneck variant, and evaluates the
learned embeddings by linear probing, zero-shot classification, and
alignment diagnostics.
"""

from ecgtext.estimators import LinearProbe, SignalTextPretrainer, ZeroShotClassifier

__version__ = "0.1.0"

__all__ = [
    "SignalTextPretrainer",
    "LinearProbe",
    "ZeroShotClassifier",
    "__version__",
]
