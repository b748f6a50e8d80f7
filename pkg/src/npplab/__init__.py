"""npplab: plant simulator, decision-tree advisor, explanation selection,
session protocol, scripted users, and behavioral telemetry."""

__version__ = "0.1.0"
