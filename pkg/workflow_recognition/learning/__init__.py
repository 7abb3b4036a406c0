"""Network and classifier training."""
