"""raglab: a desk-scale retrieval-augmented generation lab.

One frozen byte-level transformer backbone serves two LoRA adapters: a
contrastive retriever and an instruction-tuned generator. The package covers
the full pipeline: corpus construction, continual pre-training, contrastive
training with hard-negative mining, instruction tuning, exact vector search,
inference, and evaluation, plus two baselines that share either everything or
nothing between the two tasks.
"""

__version__ = "0.1.0"

from .backbone import BackboneConfig
from .config import RunConfig, load_config
from .lora import LoraConfig, RegimeConfig, count_parameters
from .synth import SynthSpec

__all__ = [
    "BackboneConfig",
    "LoraConfig",
    "RegimeConfig",
    "RunConfig",
    "SynthSpec",
    "__version__",
    "count_parameters",
    "load_config",
]
