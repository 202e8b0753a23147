"""Semi-supervised crowd counting with a pyramid of rank-consistent feature patches."""

__version__ = "0.1.0"
