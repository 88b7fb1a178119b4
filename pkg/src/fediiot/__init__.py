"""Deterministic federated-learning simulator with federated-GAN data augmentation."""

__version__ = "0.1.0"
