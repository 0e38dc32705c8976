"""Structured report handling: captions, negation, OSL pairs and text encoders."""
