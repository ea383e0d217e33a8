"""Friend-Q multi-agent signal control on a small slot-based traffic simulator."""
__version__ = "0.1.0"
