"""RGB-D landmark detection with depth-aware geometric prompts."""

__version__ = "0.1.0"
