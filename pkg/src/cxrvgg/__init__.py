"""From-scratch VGG16/VGG19 chest X-ray classification with stratified cross-validation."""

__version__ = "0.1.0"
