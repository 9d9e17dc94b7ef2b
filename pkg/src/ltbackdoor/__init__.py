"""Backdoor attack framework for long-tailed image classification.

Builds imbalanced datasets, schedules class-wise augmentation strengths
for clean samples, learns instance-wise weak augmentations for poisoned
samples, and jointly trains a classifier with a sample-specific trigger
generator. Reports clean accuracy and attack success rate per class and
per Many/Medium/Few group.
"""

from .errors import ConfigError, DomainError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DomainError", "__version__"]
