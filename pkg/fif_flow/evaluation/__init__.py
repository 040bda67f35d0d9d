"""Evaluation metrics and diagnostics."""
