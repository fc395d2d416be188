"""Mobility-of-care analytics over transit smart-card stage data."""

__version__ = "0.1.0"
