"""Desk-scale autoregressive 3D generation: text-instructed voxel scenes
built object by object with a flow-matching transformer over VAE latents.
"""

__version__ = "0.1.0"
