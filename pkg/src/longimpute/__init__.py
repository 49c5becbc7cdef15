"""Missing-data strategies for longitudinal trial outcomes."""
__version__ = "0.1.0"
