"""Task-incremental learning with exact per-task unlearning on sparse subnetworks."""

__version__ = "0.1.0"
