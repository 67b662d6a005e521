"""Desk-scale text-to-LiDAR diffusion: range-map projection, v-parameterized
denoising with self-conditioned representation guidance, ControlNet-style
conditioning, procedural scenes, box-prior text annotation, and evaluation."""

__version__ = "0.1.0"
