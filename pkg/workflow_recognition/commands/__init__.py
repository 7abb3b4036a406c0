"""CLI verb handlers."""
