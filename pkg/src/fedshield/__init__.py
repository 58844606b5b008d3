"""Federated mixture-of-experts classification with a client-side test-time
defense: masked-autoencoder detection and adaptive diffusion purification."""

__version__ = "0.1.0"
