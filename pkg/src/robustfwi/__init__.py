"""Robust frequency-domain waveform inversion with sampled misfits."""

__version__ = "0.1.0"
