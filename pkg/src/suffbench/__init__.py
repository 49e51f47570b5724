"""Batch harness for measuring how far LLM self-explanations can be
shortened while still supporting the correct multiple-choice answer."""

__version__ = "0.1.0"
