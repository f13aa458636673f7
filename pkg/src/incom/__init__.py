"""Instance-centric context mining for HOI detection on a synthetic scene world."""

__version__ = "0.1.0"
