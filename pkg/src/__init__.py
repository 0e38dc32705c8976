"""FlexiCT: dimension-flexible CT representation learning at desk scale."""

__version__ = "0.1.0"
