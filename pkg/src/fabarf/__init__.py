"""Joint camera-pose and radiance-field optimization with plain, annealed and
integrated positional encodings."""

__version__ = "0.1.0"
