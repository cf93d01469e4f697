"""Block-based deep compressive sensing with recurrent latent refinement."""

__version__ = "0.1.0"
