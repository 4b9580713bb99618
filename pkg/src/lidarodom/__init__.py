"""LiDAR odometry from dense-encoded scans with shallow siamese CNNs."""
__version__ = "0.1.0"
