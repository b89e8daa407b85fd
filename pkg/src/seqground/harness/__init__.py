"""Training, evaluation and ablation harness."""
