"""Two-stage receptive-field-restricted diffusion for few-shot defect image
and mask generation, with evaluation metrics, augmentation, and QC simulation."""

__version__ = "0.1.0"
