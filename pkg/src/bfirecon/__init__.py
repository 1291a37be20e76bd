"""CSI reconstruction from compressed beamforming feedback and attacks on CSI-based security."""

__version__ = "0.1.0"
