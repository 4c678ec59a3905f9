"""Knowledge distillation into autoregressive HMMs via constrained variational inference."""

__version__ = "0.1.0"
