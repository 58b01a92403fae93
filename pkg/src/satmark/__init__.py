"""satmark: a desk-scale invisible-watermark laboratory.

Trains a message embedder and extractor against a seeded surrogate latent
generator on its own free (promptless) generation distribution, stresses the
watermark with a differentiable attack layer, and checks an optimal-transport
generalization bound against measured test loss.
"""

__version__ = "0.1.0"
