"""3-D variational autoencoders on synthetic brain phantoms.

Subpackages and modules
-----------------------
tensor
    Reverse-mode autodiff on numpy arrays with 3-D convolutions.
phantom
    Seeded phantom volumes in five classes plus the dataset manifest.
preprocess
    Percentile clamping, normalization, trimming and block downsampling.
models
    Encoder/decoder, VAE and introspective VAE losses, training, checkpoints.
analysis
    LDA on latent means, confusion metrics, Fisher scores, traversals.
io, config, cli
    File formats, experiment configuration and the ``neurovol`` command.
"""

__version__ = "0.1.0"
