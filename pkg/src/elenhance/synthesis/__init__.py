from .diffusion import DiffusionConfig, DiffusionDecoder, diffusion_loss, guided_noise, sample, train_step
from .speaker import EmbeddingSource, SpeakerEmbedding, speaker_embedding
from .train import SynthesisRecipe, adapt_fewshot, pretrain_multispeaker
from .vocoder import ExternalVocoder, GriffinLimVocoder, make_vocoder

__all__ = [
    "DiffusionConfig",
    "DiffusionDecoder",
    "EmbeddingSource",
    "ExternalVocoder",
    "GriffinLimVocoder",
    "SpeakerEmbedding",
    "SynthesisRecipe",
    "adapt_fewshot",
    "diffusion_loss",
    "guided_noise",
    "make_vocoder",
    "pretrain_multispeaker",
    "sample",
    "speaker_embedding",
    "train_step",
]
