"""Feed-forward one-shot learners."""
