"""Quality-aware contrastive pretraining for blind image quality assessment, at desk scale."""

__version__ = "0.1.0"
