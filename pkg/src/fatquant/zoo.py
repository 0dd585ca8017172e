"""Toy models, a synthetic digit dataset, and a small float trainer.

The dataset is procedurally generated (blob-like class prototypes plus
per-sample shift/contrast/noise) so the full pipeline runs self-contained at
desk scale. Images are stored as uint8 grids, matching the IDX path exactly.
"""

from __future__ import annotations

import math

import numpy as np

from . import layers as L
from .data import Dataset
from .model import Graph
from .tune import OptimizerState, TrainConfig, adam_step

NUM_CLASSES = 10
IMG_SIDE = 28


def _prototype(cls: int, seed: int) -> np.ndarray:
    """Blobby glyph for one class: low-frequency noise, upsampled, thresholded."""
    rng = np.random.default_rng(seed * 1009 + cls)
    coarse = rng.normal(size=(7, 7))
    fine = np.kron(coarse, np.ones((4, 4)))
    # cheap smoothing to avoid blocky edges
    k = np.array([0.25, 0.5, 0.25])
    for axis in (0, 1):
        fine = (np.take(fine, np.clip(np.arange(-1, 27), 0, 27), axis=axis) * k[0]
                + fine * k[1]
                + np.take(fine, np.clip(np.arange(1, 29), 0, 27), axis=axis) * k[2])
    cut = np.quantile(fine, 0.62)
    return (fine > cut).astype(np.float64)


def make_digits(
    n: int, seed: int, noise: float = 0.25, mix_max: float = 0.49,
    tag_rate: float = 0.05,
) -> Dataset:
    """n samples of a 10-class synthetic digit-like task, uint8 pixel grid.

    Two deliberate difficulty features:
      * each sample blends its class prototype with another class; a thin
        slice sits close to the decision boundary, so small logit
        perturbations flip the hardest samples;
      * a ``tag_rate`` fraction of images carry a label-independent
        high-frequency checkerboard patch. Those rare inputs spike
        convolution activations well past the typical range, which inflates
        calibrated per-tensor thresholds (the classic activation-outlier
        problem that adjustable thresholds exist to fix).
    """
    rng = np.random.default_rng(seed)
    protos = np.stack([_prototype(c, seed=7) for c in range(NUM_CLASSES)])
    labels = rng.integers(0, NUM_CLASSES, size=n)
    images = np.zeros((n, 1, IMG_SIDE, IMG_SIDE))
    for i in range(n):
        other = (labels[i] + rng.integers(1, NUM_CLASSES)) % NUM_CLASSES
        # mostly easy samples plus a thin near-boundary slice
        if rng.uniform() < 0.9:
            lam = rng.uniform(0.0, 0.3)
        else:
            lam = rng.uniform(0.4, mix_max)
        img = (1.0 - lam) * protos[labels[i]] + lam * protos[other]
        dx, dy = rng.integers(-2, 3, size=2)
        img = np.roll(np.roll(img, dx, axis=0), dy, axis=1)
        img = img * rng.uniform(0.75, 1.15) + rng.normal(scale=noise, size=img.shape)
        # digits occupy the lower third of the pixel range; tags use the full
        # range, so tagged images dominate the calibrated activation maxima
        img = np.clip(img, 0.0, 1.0) * 0.35
        if rng.uniform() < tag_rate:
            r, c = rng.integers(0, IMG_SIDE - 8, size=2)
            img[r : r + 8, c : c + 8] = 1.0
        images[i, 0] = img
    # store on the uint8 grid so IDX round trips are exact
    images = np.round(images * 255.0) / 255.0
    return Dataset(images=images, labels=labels)


def _he(rng, shape, fan_in) -> np.ndarray:
    return rng.normal(scale=math.sqrt(2.0 / fan_in), size=shape)


def _bn_blob(rng, channels: int, gamma_spread: float) -> np.ndarray:
    """Fixed inference-mode BN stats; log-uniform gamma spread creates the
    per-channel magnitude disparity that makes per-tensor quantization hurt."""
    gamma = np.exp(rng.uniform(-math.log(gamma_spread), math.log(gamma_spread),
                               size=channels))
    beta = rng.normal(scale=0.1, size=channels)
    mean = rng.normal(scale=0.05, size=channels)
    var = np.exp(rng.uniform(-0.5, 0.5, size=channels))
    return np.stack([gamma, beta, mean, var])


def toy_cnn(seed: int = 0, c1: int = 8, c2: int = 16,
            gamma_spread: float = 3.0) -> Graph:
    """2 conv + 1 DWS + 1 FC classifier with batch norm, 28x28 inputs.

    Contains one DWS -> ReLU6 -> Conv chain so the whole transform pipeline
    is exercised.
    """
    rng = np.random.default_rng(seed)
    side = IMG_SIDE // 4
    layers = [
        L.LayerSpec("conv1", L.CONV2D, {"stride": 1, "pad": 1},
                    _he(rng, (c1, 1, 3, 3), 9), np.zeros(c1), ["input"]),
        L.LayerSpec("bn1", L.BATCH_NORM, {"eps": 1e-5},
                    _bn_blob(rng, c1, gamma_spread), None, ["conv1"]),
        L.LayerSpec("relu1", L.RELU, {}, None, None, ["bn1"]),
        L.LayerSpec("pool1", L.AVG_POOL, {"window": 2, "stride": 2},
                    None, None, ["relu1"]),
        L.LayerSpec("dws", L.DWSCONV2D, {"stride": 1, "pad": 1},
                    _he(rng, (c1, 1, 3, 3), 9), np.zeros(c1), ["pool1"]),
        L.LayerSpec("bn_dws", L.BATCH_NORM, {"eps": 1e-5},
                    _bn_blob(rng, c1, gamma_spread), None, ["dws"]),
        L.LayerSpec("relu6", L.RELU6, {}, None, None, ["bn_dws"]),
        L.LayerSpec("conv2", L.CONV2D, {"stride": 1, "pad": 0},
                    _he(rng, (c2, c1, 1, 1), c1), np.zeros(c2), ["relu6"]),
        L.LayerSpec("bn2", L.BATCH_NORM, {"eps": 1e-5},
                    _bn_blob(rng, c2, gamma_spread), None, ["conv2"]),
        L.LayerSpec("relu2", L.RELU, {}, None, None, ["bn2"]),
        L.LayerSpec("pool2", L.AVG_POOL, {"window": 2, "stride": 2},
                    None, None, ["relu2"]),
        L.LayerSpec("fc", L.FULLY_CONNECTED, {},
                    _he(rng, (NUM_CLASSES, c2 * side * side), c2 * side * side),
                    np.zeros(NUM_CLASSES), ["pool2"]),
    ]
    return Graph(layers=layers, input_id="input", output_id="fc")


def plant_channel_outlier(g: Graph, gain: float = 8.0, channel: int = 0,
                          bn_id: str = "bn2", fc_id: str = "fc") -> Graph:
    """Scale one channel up through the bn->relu->pool->fc tail, compensating
    in the FC weights, so the float function is unchanged while calibrated
    per-tensor activation thresholds inflate by roughly ``gain``.

    Jointly trained networks end up with exactly this kind of hidden channel
    imbalance; training here would otherwise equalize it away because every
    layer is trained against the same loss.
    """
    lmap = g.layer_map()
    bn, fc = lmap[bn_id], lmap[fc_id]
    bn.weights[L.BN_GAMMA, channel] *= gain
    bn.weights[L.BN_BETA, channel] *= gain
    per_ch = fc.weights.shape[1] // bn.weights.shape[1]
    cols = slice(channel * per_ch, (channel + 1) * per_ch)
    fc.weights[:, cols] /= gain
    return g


def float_backward(g: Graph, values: dict, grad_out: np.ndarray) -> dict[str, np.ndarray]:
    """Plain float backprop; returns weight/bias grads keyed 'w:<id>'/'b:<id>'."""
    gmap = {g.output_id: grad_out}
    grads: dict[str, np.ndarray] = {}
    for lay in reversed(g.layers):
        gy = gmap.pop(lay.id, None)
        if gy is None:
            continue
        xs = [values[r] for r in lay.inputs]
        gxs, gw, gb = L.backward(lay, xs, gy)
        if gw is not None:
            grads[f"w:{lay.id}"] = gw
        if gb is not None:
            grads[f"b:{lay.id}"] = gb
        for ref, gx in zip(lay.inputs, gxs):
            gmap[ref] = gmap.get(ref, 0) + gx
    return grads


def _ce_grad(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    loss = -float(np.log(p[np.arange(n), labels] + 1e-300).mean())
    g = p.copy()
    g[np.arange(n), labels] -= 1.0
    return loss, g / n


def train_float(
    g: Graph, ds: Dataset, epochs: int = 10, lr: float = 2e-3,
    batch_size: int = 64, seed: int = 0,
) -> list[float]:
    """Train the graph's weights in place with softmax cross entropy + Adam.

    Utility for producing float reference models; quantization fine-tuning
    never touches weights.
    """
    weights = {}
    for lay in g.layers:
        if lay.kind in L.WEIGHTED:
            weights[f"w:{lay.id}"] = lay.weights
            if lay.bias is not None:
                weights[f"b:{lay.id}"] = lay.bias
    cfg = TrainConfig(batch_size=batch_size, epochs=epochs, lr=lr, seed=seed,
                      cosine_period=10**9)
    state = OptimizerState.init_for(weights)
    rng = np.random.default_rng(seed)
    n = len(ds)
    losses = []
    for _ in range(epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            x, y = ds.images[idx], ds.labels[idx]
            logits, values = g.forward(x, want_all=True)
            loss, gz = _ce_grad(logits, y)
            grads = float_backward(g, values, gz)
            adam_step(state, weights, grads, lr, cfg)
            epoch_loss += loss * len(idx)
        losses.append(epoch_loss / n)
    return losses


def accuracy(logits_fn, ds: Dataset, batch_size: int = 256) -> float:
    """Top-1 accuracy of a logits function over a labeled dataset."""
    hits = 0
    for start in range(0, len(ds), batch_size):
        x = ds.images[start : start + batch_size]
        y = ds.labels[start : start + batch_size]
        pred = np.argmax(logits_fn(x), axis=1)
        hits += int((pred == y).sum())
    return hits / len(ds)
