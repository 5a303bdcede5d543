"""wood: curate hard out-of-distribution images and train a classifier whose
localization seeds stop crediting spuriously correlated backgrounds."""

__version__ = "0.1.0"
