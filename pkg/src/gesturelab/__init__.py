"""Audio-driven gesture synthesis with a split latent space, on a numpy autodiff core."""

__version__ = "0.1.0"
