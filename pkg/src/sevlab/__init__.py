"""Desk-scale simulator and cryptanalysis toolkit for attacks on tweaked
memory encryption of virtual machines."""

__version__ = "0.1.0"
