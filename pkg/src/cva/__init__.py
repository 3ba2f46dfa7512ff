"""Context-aware video-text alignment for temporal grounding at desk scale."""
__version__ = "0.1.0"
