"""Class-conditional diffusion augmenter with adapter fine-tuning."""

from .augment import augment_class
from .nets import (PROMPT_TEMPLATES, Adapter, LabelEncoder, MLPDenoiser, UNetDenoiser,
                   adapter_forward, attention, encode_labels)
from .schedule import NoiseSchedule, forward_diffuse, make_schedule, respace, sample
from .training import (DiffusionBatch, DSRModel, build_dsr_model, dsr_losses, dsr_training_step,
                       fit, generate, load_dsr_checkpoint, noise_prediction_loss,
                       save_dsr_checkpoint)
