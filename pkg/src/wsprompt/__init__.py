"""Prompt learning for a small chest X-ray vision-language model, built on a numpy autograd core."""

__version__ = "0.1.0"
