"""Physics-informed deep-kernel GP pretraining and HMC for PDE parameter inference."""

__version__ = "0.1.0"
