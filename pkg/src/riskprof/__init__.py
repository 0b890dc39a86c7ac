"""Per-patient attack risk scores, vulnerability clustering and selectively trained detectors for CGM forecasters."""

__version__ = "0.1.0"
