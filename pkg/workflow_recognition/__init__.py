"""Surgical workflow recognition: multi-task CNN features, SVM confidences and HHMM decoding."""
