"""SSH transport-layer lab: BPP codec, simulated peers, meddler harness, analysis and scanner."""

__version__ = "0.1.0"

__all__ = ["__version__"]
