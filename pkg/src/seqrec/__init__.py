"""seqrec: a desk-scale self-attentive sequential recommender with corrected
positional-embedding and padding semantics, autoregressive rollout evaluation,
negative-sampler audits, user/item duality co-training and corpus statistics.
"""

__version__ = "0.1.0"

from seqrec.backend import backend_name

__all__ = ["backend_name", "__version__"]
