"""Hierarchical HMM over surgical phases."""
