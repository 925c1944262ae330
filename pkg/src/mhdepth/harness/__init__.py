"""Experiment harness: data generation, training, evaluation and checkpoints."""
