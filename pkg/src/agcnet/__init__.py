"""Per-sample automatic gain control for CNN training, with a batch-norm
reference, momentum SGD and a synthetic segmentation benchmark."""

__version__ = "0.1.0"
