"""Sequential recommendation from item popularity dynamics.

Items are represented only through the time series of their popularity
percentiles, so a trained model carries no per-item parameters and can be
applied unchanged to a dataset with disjoint users and items.
"""

__version__ = "0.1.0"
