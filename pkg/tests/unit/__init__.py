"""Unit tests for fif_flow modules."""
