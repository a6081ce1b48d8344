"""Desk-scale bulk-material handling: soil simulation, machine dynamics,
attack-point and path planning, tube-constrained tracking, ballistic
throwing, and cycle orchestration."""

__version__ = "0.1.0"

__all__ = [
    "soilfield", "machine", "lowlevel", "worldmap", "pathplan",
    "attackplan", "motioncontrol", "orchestrator", "config", "cli",
]
