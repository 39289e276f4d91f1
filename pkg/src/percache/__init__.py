"""percache: hierarchical predictive cache engine for RAG pipelines.

Two cooperating cache layers sit in front of a deterministic toy
transformer: a semantic QA bank serving whole answers, and a QKV prefix
tree serving reusable attention tensors. A predictor guesses future
queries during idle time and a scheduler decides how aggressively to
populate the caches.
"""

from .config import EngineConfig
from .engine import Engine, QueryOutcome

__all__ = ["EngineConfig", "Engine", "QueryOutcome"]
__version__ = "0.1.0"
