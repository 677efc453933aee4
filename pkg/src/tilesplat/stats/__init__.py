"""Quality metrics, repeated-run statistics and interval-notation tables."""
