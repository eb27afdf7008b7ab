"""Self-supervised pre-training and fine-tuning for generic event boundary detection."""

from .evaluation import evaluate_corpus, f1_at, match_boundaries, rel_dis

__all__ = ["evaluate_corpus", "f1_at", "match_boundaries", "rel_dis"]
__version__ = "0.1.0"
