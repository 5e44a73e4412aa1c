"""Semi-supervised classification on predefined evenly-distributed class centroids."""
__version__ = "0.1.0"
