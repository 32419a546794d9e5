"""Finite-difference cases: every primitive, and the composed G->C and G->D graphs.

ReLU and max-pool are not differentiable where a pre-activation is zero or a
pool window has a tie. A central difference that straddles such a point
measures a one-sided slope, not a gradient error, so each composed-graph seed draws inputs
and parameters until every kink is at least ``MARGIN`` away.
"""
import itertools

import numpy as np

from aed.autodiff import engine as ad
from aed.autodiff.gradcheck import finite_diff_check
from aed.models import (
    CONV_LAYERS,
    POOL_AFTER,
    build_discriminator,
    build_generator,
    build_predictor,
    discriminator_graph,
    generator_graph,
    predictor_graph,
)

W = 27
HEAD_WIDTHS = (32, 8, 1)
MARGIN = 1e-3


def primitive_graphs(rng):
    """(builder, params) for each primitive, composed into a scalar loss."""
    def p(*shape, name):
        return ad.parameter(rng.standard_normal(shape), name=name)

    x3, w3, b3 = p(2, 3, 10, name="x"), p(4, 3, 5, name="w"), p(4, name="b")
    t3 = ad.constant(rng.standard_normal((2, 4, 10)))
    xp = p(2, 3, 12, name="x")
    xd, wd, bd = p(5, 6, name="x"), p(3, 6, name="w"), p(3, name="b")
    td = ad.constant(rng.standard_normal((5, 3)))
    a, b = p(7, name="a"), p(7, name="b")
    pos = ad.parameter(rng.uniform(0.5, 2.0, 7), name="pos")
    xb, gam, bet = p(4, 3, 6, name="x"), p(3, name="gamma"), p(3, name="beta")
    rm, rv = np.zeros(3), np.ones(3)
    wts = ad.constant(rng.standard_normal((4, 3, 6)))
    return {
        "conv1d": (lambda: ad.mse(ad.conv1d(x3, w3, b3), t3), [x3, w3, b3]),
        "maxpool1d": (lambda: ad.sum_(ad.mul(ad.maxpool1d(xp, 3), ad.constant(
            np.arange(24.).reshape(2, 3, 4)))), [xp]),
        "dense": (lambda: ad.mse(ad.dense(xd, wd, bd), td), [xd, wd, bd]),
        "relu": (lambda: ad.sum_(ad.mul(ad.relu(a), b)), [a, b]),
        "sigmoid": (lambda: ad.sum_(ad.mul(ad.sigmoid(a), b)), [a, b]),
        "add_sub_mul": (lambda: ad.sum_(ad.mul(ad.sub(a, b), ad.add(a, b))), [a, b]),
        "scale": (lambda: ad.sum_(ad.mul(ad.scale(a, -2.5), b)), [a, b]),
        "log": (lambda: ad.sum_(ad.mul(ad.log(pos), b)), [pos, b]),
        "mean": (lambda: ad.mean(ad.mul(a, a)), [a]),
        "reshape_flatten": (lambda: ad.sum_(ad.mul(ad.flatten(ad.reshape(xd, (5, 3, 2))), ad.constant(
            np.arange(30.).reshape(5, 6)))), [xd]),
        "batchnorm_train": (lambda: ad.sum_(ad.mul(ad.batchnorm1d(
            xb, gam, bet, rm.copy(), rv.copy(), training=True), wts)), [xb, gam, bet]),
    }


def kink_margin(g, head, x) -> float:
    """Smallest distance of any ReLU input or pool runner-up from its kink."""
    gaps = []
    h = x[:, None, :]
    for i in range(1, len(CONV_LAYERS) + 1):
        z = ad.conv1d(ad.Node(h), ad.Node(g.params[f"conv{i}.weight"]),
                      ad.Node(g.params[f"conv{i}.bias"])).value
        gaps.append(np.abs(z).min())
        h = np.maximum(z, 0)
        if i - 1 in POOL_AFTER:
            p = POOL_AFTER[i - 1]
            L = h.shape[2] // p * p
            r = np.sort(h[:, :, :L].reshape(h.shape[0], h.shape[1], -1, p), axis=-1)
            live = r[..., -1] > 0
            if live.any():
                gaps.append((r[..., -1] - r[..., -2])[live].min())
            h = r[..., -1]
    f = h.reshape(h.shape[0], -1)
    for i in range(1, len(head.config["widths"])):
        f = f @ head.params[f"dense{i}.weight"].T + head.params[f"dense{i}.bias"]
        gaps.append(np.abs(f).min())
        f = np.maximum(f, 0)
    return float(min(gaps))


def composed_error(seed: int, head: str) -> float:
    """Worst relative FD error over all parameters of G and the head."""
    for attempt in itertools.count():
        rng = np.random.default_rng([seed, attempt])
        g = build_generator(W, seed=int(rng.integers(2 ** 31)))
        build = build_predictor if head == "C" else build_discriminator
        h = build(g.config["feature_len"], seed=int(rng.integers(2 ** 31)), widths=HEAD_WIDTHS)
        x = rng.standard_normal((3, W))
        if kink_margin(g, h, x) >= MARGIN:
            break
    xn = ad.Node(x)
    gn, hn = g.bind(True), h.bind(True)
    if head == "C":
        y = ad.Node(rng.standard_normal(3))

        def graph():
            return ad.mse(predictor_graph(h, generator_graph(g, xn, gn), hn), y)
    else:
        def graph():
            return ad.mean(ad.log(discriminator_graph(h, generator_graph(g, xn, gn), hn)))
    errs = finite_diff_check(graph, [*gn.values(), *hn.values()], eps=1e-5, max_entries=6, seed=seed)
    return max(errs.values())
