"""Multi-view depth projection, alignment-head training, and zero-shot 3D
classification built around file-based encoder features."""

__version__ = "0.1.0"
