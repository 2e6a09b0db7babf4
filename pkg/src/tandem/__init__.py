"""Teach and repeat route following driven by odometry with visual corrections."""

from tandem.se2 import Pose2, DegenerateSegment

__version__ = "0.1.0"

__all__ = ["Pose2", "DegenerateSegment", "__version__"]
