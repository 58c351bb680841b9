"""Multi-task driving perception: detection, drivable area and lane segmentation."""

__version__ = "0.1.0"
