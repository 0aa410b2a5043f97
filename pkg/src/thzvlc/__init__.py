"""Indoor THz/VLC wireless VR network simulator with meta policy-gradient training."""

__version__ = "0.1.0"
