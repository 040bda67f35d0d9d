"""Encoder/decoder networks, log-determinant surrogates and training objectives."""
