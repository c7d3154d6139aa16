"""Stain deconvolution, evaluation metrics and a small CycleGAN for virtual IHC."""

__version__ = "0.1.0"
