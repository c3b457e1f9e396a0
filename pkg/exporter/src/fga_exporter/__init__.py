"""Fixture producer for the fga toolkit: synthetic digit datasets, trained
reference networks, and FGA-MF v1 export bundles with probe transcripts."""

__version__ = "0.1.0"
