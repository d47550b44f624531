"""streamworld: a desk-scale interactive world simulator.

A toy diffusion-transformer world model generating an endless controllable
video stream: keyboard controls are injected through a causal cross-attention
module, frames are produced by a sliding-window denoising queue, and a 4-step
consistency-distilled student accelerates sampling to real time.
"""

__version__ = "0.1.0"
