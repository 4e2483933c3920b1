"""Desk-scale dual-encoder reward models with verifiable mechanics.

Submodules: ``tensor`` (autodiff engine), ``encoder`` (hierarchical
windowed-attention encoder), ``cross`` (cosine cross-attention), ``models``
(architecture variants), ``datagen`` (synthetic paired corpora), ``training``
(AdamW + schedule + checkpoints), ``verify`` (independent oracles), ``cli``.
"""

__version__ = "0.1.0"

from .tensor import Tensor, backward, no_grad  # noqa: F401
from .encoder import EncoderConfig, FeatureMap, SwinEncoder  # noqa: F401
from .models import ModelConfig, build_model  # noqa: F401
from .datagen import DatasetSpec, PairSample  # noqa: F401
from .training import TrainConfig, evaluate, train  # noqa: F401
