"""dexforge: planar contact simulation plus a force-informed teaching pipeline."""

__version__ = "0.1.0"
