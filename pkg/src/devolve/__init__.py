"""Evolutionary sparsification, quantization and entropy-coded packing for
small neural networks."""

from . import cli, datasets, evolution, nn, packing, quantize, sparsity

__all__ = ["cli", "datasets", "evolution", "nn", "packing", "quantize",
           "sparsity"]
__version__ = "0.1.0"
