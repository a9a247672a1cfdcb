"""Coarse-to-fine CNN cascades for segmenting sparse objects in whole-slide images."""

__version__ = "0.1.0"
