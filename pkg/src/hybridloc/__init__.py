"""Hybrid cell-code geolocalization: ground views matched against prototype plus aerial codes."""

__version__ = "0.1.0"
