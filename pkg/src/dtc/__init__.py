"""Time-series clustering in the latent space of a temporal autoencoder, on numpy."""

__version__ = "0.1.0"
