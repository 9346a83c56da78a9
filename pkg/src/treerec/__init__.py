"""Tree-coded item tokenization and transferable generative recommendation."""

__version__ = "0.1.0"
