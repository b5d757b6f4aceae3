"""Progressive teacher/data distillation for dense retrieval, on numpy."""

from .config import PipelineConfig, load_config
from .data import SyntheticSpec, generate_synthetic, load_dataset
from .encoders import CrossEncoder, DualEncoder, EncoderConfig, load_checkpoint, save_checkpoint
from .pipeline import run_pipeline

__version__ = "0.1.0"

__all__ = ["PipelineConfig", "load_config", "SyntheticSpec", "generate_synthetic", "load_dataset",
           "CrossEncoder", "DualEncoder", "EncoderConfig", "load_checkpoint", "save_checkpoint",
           "run_pipeline"]
