"""Single-particle imaging reconstruction: EMC merging, background-aware phasing
and resolution metrics for sparse photon-counting diffraction data."""

__version__ = "0.1.0"
