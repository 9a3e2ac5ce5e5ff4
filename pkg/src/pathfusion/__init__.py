"""Multi-modal (camera + LiDAR + GPS) path-loss prediction on a synthetic street scene."""

__version__ = "0.1.0"
