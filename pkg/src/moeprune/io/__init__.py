"""Artifact persistence: JSON artifacts, datasets and the logit cache."""
