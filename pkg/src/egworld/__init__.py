"""egworld: a desk-scale lab for pose-conditioned egocentric video generation."""

__version__ = "0.1.0"
