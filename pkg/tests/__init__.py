"""Test suite for the cell-free conjugate beamforming simulator."""
