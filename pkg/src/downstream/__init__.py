"""Downstream adaptation: segmentation, classification, zero-shot, retrieval and probing."""
