"""Two-step multi-resolution training (multi-resolution pretraining, then task
fine-tuning) for small expression-style image classifiers, with the evaluation
stack used to judge it: accuracy protocols, k-fold, confusion matrices and
content-based retrieval."""

__version__ = "0.1.0"
