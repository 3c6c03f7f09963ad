from .network import CapacityError, EmbeddingError, LayoutModel, ModelConfig, TrainBatch
from .masks import GeneratorSlots, generator_base_mask, silence, structure_mask

__all__ = [
    "CapacityError",
    "EmbeddingError",
    "GeneratorSlots",
    "LayoutModel",
    "ModelConfig",
    "TrainBatch",
    "generator_base_mask",
    "silence",
    "structure_mask",
]
