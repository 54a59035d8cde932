"""Tactile-gated vision-language-action policy with a dual-frequency runtime."""

__version__ = "0.1.0"
