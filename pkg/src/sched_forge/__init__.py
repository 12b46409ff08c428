"""Batch-job scheduling simulator with rule-based and learned (DD-PPO) schedulers."""

__version__ = "0.1.0"
