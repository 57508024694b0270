"""Heteroscedastic diffusion for multi-agent trajectory completion."""

__version__ = "0.1.0"
