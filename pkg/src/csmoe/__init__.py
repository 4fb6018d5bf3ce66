"""Desk-scale speech LM with a mixture-of-experts connector for Mandarin-English
code-switching ASR."""

__version__ = "0.1.0"
