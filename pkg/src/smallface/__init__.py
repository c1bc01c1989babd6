"""Small-face detection: four-branch anchor heads, feature-map fusion, multi-scale testing."""

__version__ = "0.1.0"
