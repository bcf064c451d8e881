"""Unsupervised few-shot learner trained by alternating pseudo-label
clustering with episodic metric learning."""

__version__ = "0.1.0"
