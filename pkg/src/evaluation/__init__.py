"""Segmentation/retrieval metrics and the statistical testing protocol."""
