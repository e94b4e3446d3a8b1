"""YOLO-family detection maths and evaluation toolkit for Salat posture detection."""

__version__ = "0.1.0"
