"""annotator: caption driving frames, refine against ground truth, export
text embeddings in the BTXE interchange format."""

__version__ = "0.1.0"
