"""Semi-supervised adversarial training, GMM-based adversarial detection and
adversarial risk evaluation on a small numpy network."""

__version__ = "0.1.0"
