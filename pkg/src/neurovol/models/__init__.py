"""3-D VAE / introspective VAE models, their losses and training loops."""

from .architecture import (
    DECODER,
    ENCODER,
    ArchitectureConfig,
    ParameterStore,
    VAEModel,
    build_decoder,
    build_encoder,
)
from .checkpoint import (
    Checkpoint,
    CheckpointError,
    checkpoint_from_model,
    load_checkpoint,
    load_into,
    model_from_checkpoint,
    save_checkpoint,
)
from .inference import decode, encode, encode_means, reconstruct, sample_prior
from .losses import (
    LatentCode,
    NonFiniteLatent,
    gan_objective_value,
    hinge,
    ivae_encoder_loss,
    ivae_generator_loss,
    kl_divergence,
    reconstruction_loss,
    reparameterize,
    vae_loss,
)
from .training import (
    TrainConfig,
    TrainingDiverged,
    TrainResult,
    loss_csv,
    train_ivae,
    train_vae,
    write_loss_csv,
)
