"""Identification of blinking LED beacons from event-camera streams."""

__version__ = "0.1.0"
