"""hetfx: overlap-weighted effects of multiple heterogeneous treatments."""

__version__ = "0.1.0"
