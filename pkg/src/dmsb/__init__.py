"""Diffusion-tuned modified second-bid auctions for UAV / base-station task offloading."""

__version__ = "0.1.0"
