"""Feature generator, predictor and discriminator networks.

Generator: conv(7, 30) -> pool 3 -> conv(5, 40) -> conv(5, 40) -> conv(3, 50)
-> pool 2 -> flatten, ReLU after every convolution, replication padding so
each convolution keeps the sequence length.
Predictor: dense widths 1024 -> 128 -> 1 with ReLU between, linear output.
Discriminator: dense widths 256 -> 64 -> 1, ReLU between, sigmoid output.
"""
from __future__ import annotations

import copy
from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np

from .autodiff import engine as ad
from .autodiff.engine import Node, ShapeError

CONV_LAYERS = ((7, 30), (5, 40), (5, 40), (3, 50))
POOL_AFTER = {0: 3, 3: 2}
PREDICTOR_WIDTHS = (1024, 128, 1)
DISCRIMINATOR_WIDTHS = (256, 64, 1)
DROPOUT_P = 0.1
MIN_WINDOW = 27


def feature_length(W: int) -> int:
    return CONV_LAYERS[-1][1] * ((W // 3) // 2)


@dataclass
class Network:
    """Named parameter set for one network role."""

    role: str
    params: dict[str, np.ndarray]
    config: dict
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "Network":
        return Network(self.role, {k: v.copy() for k, v in self.params.items()},
                       copy.deepcopy(self.config), {k: v.copy() for k, v in self.buffers.items()})

    def bind(self, trainable: bool = False) -> dict[str, Node]:
        """Wrap parameters as graph leaves sharing this network's memory."""
        return {k: Node(v, requires_grad=trainable, name=k) for k, v in self.params.items()}

    def astype(self, dtype) -> "Network":
        net = self.copy()
        net.params = {k: v.astype(dtype) for k, v in net.params.items()}
        net.buffers = {k: v.astype(dtype) for k, v in net.buffers.items()}
        return net

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def state(self) -> dict[str, np.ndarray]:
        """Parameters and buffers, as stored in checkpoints."""
        out = dict(self.params)
        out.update({f"buffer:{k}": v for k, v in self.buffers.items()})
        return out


GeneratorParams = PredictorParams = DiscriminatorParams = Network


def _dtype(precision: str):
    return np.float32 if precision == "f32" else np.float64


def _he(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def build_generator(W: int = 599, precision: str = "f64", seed: int = 0,
                    batchnorm: bool = False) -> Network:
    if W % 2 == 0:
        raise ValueError(f"window size must be odd, got {W}")
    if W < MIN_WINDOW:
        raise ValueError(f"window size {W} too small; need W >= {MIN_WINDOW}")
    dt = _dtype(precision)
    rng = np.random.default_rng(seed)
    params, buffers = {}, {}
    cin = 1
    for i, (k, cout) in enumerate(CONV_LAYERS, start=1):
        params[f"conv{i}.weight"] = _he(rng, (cout, cin, k), cin * k, dt)
        params[f"conv{i}.bias"] = np.zeros(cout, dtype=dt)
        if batchnorm:
            params[f"bn{i}.gamma"] = np.ones(cout, dtype=dt)
            params[f"bn{i}.beta"] = np.zeros(cout, dtype=dt)
            buffers[f"bn{i}.running_mean"] = np.zeros(cout, dtype=dt)
            buffers[f"bn{i}.running_var"] = np.ones(cout, dtype=dt)
        cin = cout
    config = {"W": W, "feature_len": feature_length(W), "batchnorm": batchnorm, "seed": seed}
    return Network("generator", params, config, buffers)


def _build_mlp(role: str, feature_len: int, widths, seed: int, precision: str,
               dropout: bool) -> Network:
    dt = _dtype(precision)
    rng = np.random.default_rng(seed)
    params = {}
    n = feature_len
    for i, m in enumerate(widths, start=1):
        params[f"dense{i}.weight"] = _he(rng, (m, n), n, dt)
        params[f"dense{i}.bias"] = np.zeros(m, dtype=dt)
        n = m
    config = {"feature_len": feature_len, "widths": list(widths), "dropout": dropout, "seed": seed}
    return Network(role, params, config)


def build_predictor(feature_len: int, seed: int = 0, precision: str = "f64",
                    widths=PREDICTOR_WIDTHS, dropout: bool = False) -> Network:
    if widths[-1] != 1:
        raise ValueError("predictor must end in a single output unit")
    return _build_mlp("predictor", feature_len, widths, seed, precision, dropout)


def build_discriminator(feature_len: int, seed: int = 0, precision: str = "f64",
                        widths=DISCRIMINATOR_WIDTHS, dropout: bool = False) -> Network:
    if widths[-1] != 1:
        raise ValueError("discriminator must end in a single output unit")
    return _build_mlp("discriminator", feature_len, widths, seed, precision, dropout)


# ---------------------------------------------------------------- graphs

def generator_graph(net: Network, windows, nodes: Mapping[str, Node] | None = None,
                    training: bool = False) -> Node:
    """(B, W) mains windows -> (B, feature_len) features as a graph node."""
    nodes = nodes if nodes is not None else net.bind()
    x = ad.as_node(windows)
    W = net.config["W"]
    if x.value.ndim != 2 or x.shape[1] != W:
        raise ShapeError(f"generator expects windows of width {W}, got shape {x.shape}")
    h = ad.reshape(x, (x.shape[0], 1, W))
    for i in range(1, len(CONV_LAYERS) + 1):
        h = ad.conv1d(h, nodes[f"conv{i}.weight"], nodes[f"conv{i}.bias"])
        if net.config.get("batchnorm"):
            h = ad.batchnorm1d(h, nodes[f"bn{i}.gamma"], nodes[f"bn{i}.beta"],
                               net.buffers[f"bn{i}.running_mean"],
                               net.buffers[f"bn{i}.running_var"], training)
        h = ad.relu(h)
        if i - 1 in POOL_AFTER:
            h = ad.maxpool1d(h, POOL_AFTER[i - 1])
    return ad.flatten(h)


def _mlp_graph(net: Network, features, nodes, training: bool, rng) -> Node:
    nodes = nodes if nodes is not None else net.bind()
    h = ad.as_node(features)
    F = net.config["feature_len"]
    if h.value.ndim != 2 or h.shape[1] != F:
        raise ShapeError(f"{net.role} expects features of width {F}, got shape {h.shape}")
    depth = len(net.config["widths"])
    for i in range(1, depth + 1):
        h = ad.dense(h, nodes[f"dense{i}.weight"], nodes[f"dense{i}.bias"])
        if i < depth:
            h = ad.relu(h)
            if training and net.config.get("dropout"):
                if rng is None:
                    raise ValueError("dropout in training mode needs an rng")
                keep = (rng.random(h.shape) >= DROPOUT_P) / (1 - DROPOUT_P)
                h = ad.mul(h, ad.Node(keep.astype(h.value.dtype)))
    return ad.reshape(h, (h.shape[0],))


def predictor_graph(net: Network, features, nodes=None, training=False, rng=None) -> Node:
    return _mlp_graph(net, features, nodes, training, rng)


def discriminator_graph(net: Network, features, nodes=None, training=False, rng=None) -> Node:
    return ad.sigmoid(_mlp_graph(net, features, nodes, training, rng))


# ---------------------------------------------------------------- plain forward

def _as_input(net: Network, x) -> np.ndarray:
    return np.asarray(x, dtype=net.dtype)


def generator_forward(net: Network, batch, training: bool = False) -> np.ndarray:
    return generator_graph(net, ad.Node(_as_input(net, batch)), training=training).value


def predictor_forward(net: Network, features, training: bool = False, rng=None) -> np.ndarray:
    return predictor_graph(net, ad.Node(_as_input(net, features)), training=training, rng=rng).value


def discriminator_forward(net: Network, features, training: bool = False, rng=None) -> np.ndarray:
    p = discriminator_graph(net, ad.Node(_as_input(net, features)), training=training, rng=rng).value
    fi = np.finfo(p.dtype)
    return np.clip(p, fi.tiny, 1 - fi.epsneg)


def predict(generator: Network, predictor: Network, batch, chunk: int = 256) -> np.ndarray:
    """Evaluation-mode predictions for many windows, in chunks."""
    batch = np.asarray(batch)
    out = [predictor_forward(predictor, generator_forward(generator, batch[i:i + chunk]))
           for i in range(0, len(batch), chunk)]
    return np.concatenate(out) if out else np.zeros(0, dtype=generator.dtype)
