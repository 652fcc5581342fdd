"""OFDM waveform design under PAPR and ACLR constraints."""

__version__ = "0.1.0"
