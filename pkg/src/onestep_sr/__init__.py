"""One-step super-resolution by distilling a residual-shifting diffusion teacher."""

__version__ = "0.1.0"
