"""Cell-free massive MIMO conjugate beamforming simulator."""

__version__ = "1.0.0"
