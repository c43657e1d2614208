"""Training pipeline: configuration, optimization, checkpoints, evaluation, CLI."""
