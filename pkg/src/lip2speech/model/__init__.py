from .core import LipToSpeech, ModelOutput, VariancePrediction, upsample
from .losses import linguistic_loss, mel_loss, variance_losses

__all__ = ["LipToSpeech", "ModelOutput", "VariancePrediction", "upsample",
           "linguistic_loss", "mel_loss", "variance_losses"]
