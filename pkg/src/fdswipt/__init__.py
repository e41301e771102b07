"""Multi-objective SDP resource allocation for full-duplex SWIPT systems."""

__version__ = "0.1.0"
