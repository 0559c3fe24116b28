"""
streamrec
=========

Simulated live-streaming recommendation: a synthetic platform, a gated
two-tower retriever, residual semantic codes and a multi-task ranker.
"""
import logging

from streamrec.config import PipelineConfig
from streamrec.config import parse_config
from streamrec.core import TASKS
from streamrec.core import EmbeddingVector
from streamrec.core import InteractionEvent
from streamrec.core import InteractionLog
from streamrec.core import QuantizedLog
from streamrec.core import Rng
from streamrec.core import SemanticCode
from streamrec.errors import StreamRecError
from streamrec.pipeline import RunReport
from streamrec.pipeline import run_pipeline
from streamrec.quantizer import Codebook
from streamrec.quantizer import build_codebooks
from streamrec.ranking import evaluate_ranking
from streamrec.ranking import train_ranking
from streamrec.retrieval import build_index
from streamrec.retrieval import evaluate_hit_rate
from streamrec.retrieval import train_retrieval
from streamrec.simgen import WorldConfig
from streamrec.simgen import emit_windows
from streamrec.simgen import generate_world
from streamrec.simgen import simulate_interactions

__version__ = "0.1.0"

logging.getLogger("streamrec").addHandler(logging.NullHandler())

__all__ = [
    "Codebook",
    "EmbeddingVector",
    "InteractionEvent",
    "InteractionLog",
    "PipelineConfig",
    "QuantizedLog",
    "Rng",
    "RunReport",
    "SemanticCode",
    "StreamRecError",
    "TASKS",
    "WorldConfig",
    "build_codebooks",
    "build_index",
    "emit_windows",
    "evaluate_hit_rate",
    "evaluate_ranking",
    "generate_world",
    "parse_config",
    "run_pipeline",
    "simulate_interactions",
    "train_ranking",
    "train_retrieval",
]
