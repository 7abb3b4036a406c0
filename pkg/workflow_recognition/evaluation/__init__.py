"""Metrics and report rendering."""
