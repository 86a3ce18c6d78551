"""Executable reference model of the SPTM/TXM/Exclaves monitor stack."""

__version__ = "0.1.0"
