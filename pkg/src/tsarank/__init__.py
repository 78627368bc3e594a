"""tsarank: two-stage adaptation of a small causal LM for text ranking.

The package trains a byte-level decoder-only transformer in two stages
(next-token pre-training on weak text pairs, then mixed-objective
fine-tuning on ranking examples), ranks documents by query-generation
likelihood, and evaluates with NDCG@k plus perplexity and token-statistic
analyses. See the `tsarank` CLI for the end-to-end experiment commands.
"""

__version__ = "0.1.0"

from .autodiff import Tensor
from .model import LmCheckpoint, LmConfig
from .objectives import SftHyperparams
from .tokenizer import TokenSequence

__all__ = ["Tensor", "LmCheckpoint", "LmConfig", "SftHyperparams", "TokenSequence", "__version__"]
