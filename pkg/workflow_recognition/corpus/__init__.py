"""Synthetic surgeries, dataset files and splits."""
