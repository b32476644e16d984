"""Measurement pipeline for Ethereum block-builder competition: transaction
labelling, block economics, builder profiles, exclusive-provider detection
and relay bid telemetry."""

__version__ = "0.1.0"
