"""Optimizer, checkpoints and the training loop."""
