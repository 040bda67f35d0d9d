"""Experiment configuration, stages and command-line entry points."""
