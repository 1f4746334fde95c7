"""Target speaker extraction: models, synthetic corpus tooling, training, evaluation."""

__version__ = "0.1.0"
