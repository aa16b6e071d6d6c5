"""ATE estimation with target/source domain transfer."""

__version__ = "1.0.0"
