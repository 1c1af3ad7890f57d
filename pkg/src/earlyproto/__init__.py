"""Early action recognition from segment features with learned class prototypes."""
__version__ = "0.1.0"
