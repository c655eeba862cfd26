"""Nearest-neighbor defenses against adversarial images, at desk scale."""

__version__ = "0.1.0"
