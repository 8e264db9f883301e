"""Multi-robot sonar SLAM with descriptor-first loop closure exchange."""

from .geometry import PointCloud2D, Pose2, SonarReturn, Transform2, between, compose, inverse

__version__ = "0.1.0"

__all__ = ["PointCloud2D", "Pose2", "SonarReturn", "Transform2", "between", "compose", "inverse"]
