"""Sequential grounding with recurrent cross-attention temporal fusion."""

__version__ = "0.1.0"
