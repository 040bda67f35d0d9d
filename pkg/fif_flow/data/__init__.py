"""Synthetic generators and tabular CSV ingestion."""
