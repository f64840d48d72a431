"""Shared builders for tests: reference densities and a small trained teacher."""

import numpy as np

from devolve import datasets, nn
from devolve.quantize import Density

BLOBS_ARCH = {"input_shape": [784], "layers": [
    {"kind": "dense", "units": 32},
    {"kind": "leaky_relu", "slope": 0.1},
    {"kind": "dense", "units": 10},
    {"kind": "softmax"},
]}


def tent_density(bins=16):
    """Triangular density on [0,1], peak at 0.5."""
    edges = np.linspace(0.0, 1.0, bins + 1)
    centers = (edges[:-1] + edges[1:]) / 2.0
    heights = np.where(centers <= 0.5, 4.0 * centers, 4.0 * (1.0 - centers))
    masses = heights * np.diff(edges)
    return Density(edges, masses / masses.sum())


def bimodal_density(depth=0.02, bins=32):
    """Two bumps at +-0.5 on [-1,1]; smaller depth = deeper valley."""
    edges = np.linspace(-1.0, 1.0, bins + 1)
    centers = (edges[:-1] + edges[1:]) / 2.0
    heights = (np.exp(-((centers + 0.5) ** 2) / depth)
               + np.exp(-((centers - 0.5) ** 2) / depth))
    masses = heights * np.diff(edges)
    return Density(edges, masses / masses.sum())


def sampled_density(seed, bins=64, n=4000):
    """Seeded histogram density of a Gaussian mixture (generic test shape)."""
    rng = np.random.default_rng(seed)
    parts = [rng.normal(-1.0, 0.6, size=n // 2), rng.normal(0.8, 0.9, size=n // 2)]
    return Density.from_samples(np.concatenate(parts), bins=bins)


def train_blobs_teacher(seed=1, data_seed=7, n=2048, epochs=8, lr=0.2):
    """784-d blobs problem and a small dense teacher trained on it."""
    ds = datasets.synthetic_dataset("blobs", n, 10, seed=data_seed, feature_dim=784)
    net = nn.build_network(BLOBS_ARCH, seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7EA1]))
    for _ in range(epochs):
        order = rng.permutation(ds.size)
        for lo in range(0, ds.size, 64):
            idx = order[lo:lo + 64]
            batch = nn.Batch(ds.inputs[idx], ds.labels[idx])
            grads = nn.backward(net, batch, "cross_entropy")
            net = nn.sgd_step(net, grads, lr)
    return net, ds
