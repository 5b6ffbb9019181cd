"""Graph filter banks for signals on graphs that gain an incoming node."""
__version__ = "0.1.0"
