"""Small-area network scale-up estimation with direct probe groups."""
__version__ = "0.1.0"
