"""LoRA adaptation of a small transformer encoder plus mechanistic probes of what the adapters do."""

from .analysis import cka, contribution_probe, k90, logit_lens, spectrum_analysis
from .config import RunConfig
from .data import SeqBatch, SynthSpec, generate, load_external, split
from .instrument import GradientLog, TraceRecord, trace_batch
from .model import LoraConfig, ModelConfig
from .train import Checkpoint, OptimConfig, pretrain_backbone, train

__version__ = "0.1.0"
