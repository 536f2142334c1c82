"""Curriculum-scheduled MAML for few-shot classification."""

__version__ = "0.1.0"
