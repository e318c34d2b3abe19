"""Laboratory-abnormality estimation from ECG features with boosted stumps."""

__version__ = "0.1.0"
