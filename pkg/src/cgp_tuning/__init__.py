"""Graph-enhanced soft prompt tuning for code vulnerability detection with a frozen LM."""

from .config import AblationConfig, AlignConfig, EncoderConfig, RunConfig, TrainConfig, desk_train_config
from .evaluation import MetricsReport, evaluate, macro_metrics
from .graph_model import CodeGraph, EdgeType, NodeType, Sample, parse_graph, read_corpus, synth_dataset
from .lm import TinyLM, TinyLMConfig
from .model import VulnDetector, build_model
from .training import load_checkpoint, save_checkpoint, train, trainable_parameters

__all__ = [
    "AblationConfig", "AlignConfig", "EncoderConfig", "RunConfig", "TrainConfig", "desk_train_config",
    "MetricsReport", "evaluate", "macro_metrics",
    "CodeGraph", "EdgeType", "NodeType", "Sample", "parse_graph", "read_corpus", "synth_dataset",
    "TinyLM", "TinyLMConfig", "VulnDetector", "build_model",
    "load_checkpoint", "save_checkpoint", "train", "trainable_parameters",
]
