"""Multi-step pre-training for end-to-end speech translation, at desk scale."""
from .data import SharedVocab, SyntheticTaskSpec, TranslationTask, blank_perturb, gen_corpus, strip_blanks
from .estimator import MSPSTTranslator
from .model import ModelAssembly, ModelConfig, freeze_for_phase
from .pipeline import PipelineConfig, run_ablation_grid, run_pipeline

__all__ = [
    "MSPSTTranslator", "ModelAssembly", "ModelConfig", "PipelineConfig", "SharedVocab",
    "SyntheticTaskSpec", "TranslationTask", "blank_perturb", "freeze_for_phase", "gen_corpus",
    "run_ablation_grid", "run_pipeline", "strip_blanks",
]
__version__ = "0.1.0"
