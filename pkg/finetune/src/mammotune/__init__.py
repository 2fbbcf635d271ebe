"""mammotune: low-rank adapter fine-tuning over the rebalanced mammogram
dataset, exporting predictions in the shared results JSONL schema."""

__version__ = "0.1.0"
