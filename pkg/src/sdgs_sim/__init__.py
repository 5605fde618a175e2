"""Edge-side residual TA/CFO control simulator for LEO ground-station uplinks."""

__version__ = "0.1.0"
