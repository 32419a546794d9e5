"""Appliance-specific pretraining and multi-adversarial training.

Pretraining fits one (generator, predictor) pair per appliance by mean squared
error on normalised midpoint targets. Adversarial training then fits a target
(generator, predictor) pair while N discriminators, one per frozen pretrained
generator, try to tell its features apart from each appliance-specific
feature set:

    min_{G, C} max_{D_1..D_N}  sum_j E[log D_j(G(y)) + log(1 - D_j(G_j(y)))] + lam * L_pred

Each batch updates D_1..D_N in order, then G and C once.
"""
from __future__ import annotations

import math
import zlib
from collections.abc import Callable, Sequence
from dataclasses import asdict, dataclass, field

import numpy as np

from ..autodiff import engine as ad
from ..models import (
    DISCRIMINATOR_WIDTHS,
    PREDICTOR_WIDTHS,
    Network,
    build_discriminator,
    build_generator,
    build_predictor,
    discriminator_forward,
    discriminator_graph,
    generator_forward,
    generator_graph,
    predict,
    predictor_graph,
)
from ..signals import WindowDataset
from .adam import AdamState, adam_step

Logger = Callable[[dict], None]


class TrainingError(RuntimeError):
    pass


class TrainingDivergence(TrainingError):
    """Non-finite loss; carries the last good networks and the epoch reached."""

    def __init__(self, message: str, epoch: int, last_good: dict[str, Network] | None = None):
        super().__init__(message)
        self.epoch = epoch
        self.last_good = last_good or {}


@dataclass
class TrainConfig:
    lam: float = 0.05
    batch_size: int = 64
    max_epochs: int = 10
    seed: int = 0
    precision: str = "f64"
    adversarial: bool = True
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int = 3
    non_saturating: bool = False
    warm_start: bool = True
    disc_warmup: int = 0
    val_max_windows: int = 4000
    batchnorm: bool = False
    dropout: bool = False
    predictor_widths: tuple[int, ...] = PREDICTOR_WIDTHS
    discriminator_widths: tuple[int, ...] = DISCRIMINATOR_WIDTHS

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError(f"lam must be > 0, got {self.lam}")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")
        if self.precision not in ("f32", "f64"):
            raise ValueError(f"precision must be f32 or f64, got {self.precision!r}")
        self.predictor_widths = tuple(self.predictor_widths)
        self.discriminator_widths = tuple(self.discriminator_widths)

    @classmethod
    def paper(cls, **kw) -> "TrainConfig":
        return cls(**{"batch_size": 1000, "max_epochs": 50, "lam": 0.05, **kw})

    def batches_per_epoch(self, n_windows: int) -> int:
        return math.ceil(n_windows / self.batch_size)

    def adam(self) -> AdamState:
        return AdamState(self.lr, self.beta1, self.beta2, self.eps)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["predictor_widths"] = list(self.predictor_widths)
        d["discriminator_widths"] = list(self.discriminator_widths)
        return d


def derive_seed(seed: int, *tags) -> int:
    keys = [int(t) if isinstance(t, int) else zlib.crc32(str(t).encode()) for t in tags]
    return int(np.random.SeedSequence([int(seed), *keys]).generate_state(1)[0])


def _prefixed(net: Network, prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": v for k, v in net.params.items()}


def _grads_by_name(grads: dict[ad.Node, np.ndarray], nodes: dict[str, ad.Node],
                   prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": grads.get(n, np.zeros_like(n.value)) for k, n in nodes.items()}


def evaluate_mae(generator: Network, predictor: Network, data: WindowDataset,
                 batch_size: int = 256) -> float:
    """MAE in normalised units over every window of ``data``."""
    total, n = 0.0, 0
    for b in data.iter_batches(batch_size, dtype=generator.dtype):
        pred = predict(generator, predictor, b.windows, chunk=batch_size)
        total += float(np.abs(pred.astype(np.float64) - b.targets).sum())
        n += len(b)
    return total / n


def _finite(x: float, what: str, epoch: int, last_good) -> None:
    if not np.isfinite(x):
        raise TrainingDivergence(f"non-finite {what} in epoch {epoch}", epoch, last_good)


@dataclass
class PretrainResult:
    generator: Network
    predictor: Network
    loss_trace: list[float]
    val_mae_trace: list[float]
    best_epoch: int
    history: list[dict] = field(default_factory=list)


def _init_pair(W: int, config: TrainConfig, tag: str) -> tuple[Network, Network]:
    g = build_generator(W, config.precision, derive_seed(config.seed, tag, "G"), config.batchnorm)
    c = build_predictor(g.config["feature_len"], derive_seed(config.seed, tag, "C"), config.precision,
                        config.predictor_widths, config.dropout)
    return g, c


class _EarlyStopper:
    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = -1
        self.snapshot: dict[str, Network] = {}
        self.bad = 0

    def update(self, epoch: int, score: float, nets: dict[str, Network]) -> bool:
        """Record an epoch score; return True when training should stop."""
        if score < self.best:
            self.best, self.best_epoch, self.bad = score, epoch, 0
            self.snapshot = {k: v.copy() for k, v in nets.items()}
            return False
        self.bad += 1
        return self.bad >= self.patience


def _prediction_loop(train: WindowDataset, val: WindowDataset | None, config: TrainConfig,
                     generator: Network, predictor: Network, stage: str, loss_scale: float,
                     log: Logger | None, extra: dict) -> PretrainResult:
    """Minimise ``loss_scale * MSE`` over (generator, predictor) with Adam."""
    dtype = generator.dtype
    rng = np.random.default_rng(derive_seed(config.seed, stage, "data"))
    state = config.adam()
    stopper = _EarlyStopper(config.patience)
    val = val.subsample(config.val_max_windows) if val is not None else None
    loss_trace, val_trace, history = [], [], []
    for epoch in range(1, config.max_epochs + 1):
        losses = []
        for batch in train.iter_batches(config.batch_size, rng, dtype):
            gn, cn = generator.bind(True), predictor.bind(True)
            feats = generator_graph(generator, ad.Node(batch.windows), gn, training=True)
            pred = predictor_graph(predictor, feats, cn, training=True, rng=rng)
            lp = ad.mse(pred, ad.Node(batch.targets))
            loss = ad.scale(lp, loss_scale) if loss_scale != 1.0 else lp
            _finite(float(lp.value), "prediction loss", epoch,
                    stopper.snapshot or {"generator": generator, "predictor": predictor})
            grads = ad.backward(loss)
            params = {**_prefixed(generator, "G"), **_prefixed(predictor, "C")}
            adam_step(params, {**_grads_by_name(grads, gn, "G"), **_grads_by_name(grads, cn, "C")},
                      state)
            losses.append(float(lp.value))
        loss_trace.extend(losses)
        score = evaluate_mae(generator, predictor, val) if val is not None else float(np.mean(losses))
        val_trace.append(score)
        record = {"stage": stage, "epoch": epoch, "train_loss": float(np.mean(losses)),
                  "val_mae": score, **extra}
        history.append(record)
        if log:
            log(record)
        if stopper.update(epoch, score, {"generator": generator, "predictor": predictor}):
            break
    best = stopper.snapshot
    return PretrainResult(best["generator"], best["predictor"], loss_trace, val_trace,
                          stopper.best_epoch, history)


def pretrain_appliance(train: WindowDataset, val: WindowDataset | None, config: TrainConfig,
                       appliance: str = "appliance", log: Logger | None = None) -> PretrainResult:
    """Fit an appliance-specific (generator, predictor) pair by midpoint MSE.

    Returns the networks from the epoch with the best validation MAE
    (normalised units).
    """
    if len(train) == 0:
        raise TrainingError("empty training set")
    g, c = _init_pair(train.window_size, config, appliance)
    return _prediction_loop(train, val, config, g, c, "pretrain", 1.0, log,
                            {"appliance": appliance})


@dataclass
class AdversarialResult:
    generator: Network
    predictor: Network
    discriminators: list[Network]
    loss_trace: list[float]
    val_mae_trace: list[float]
    history: list[dict]
    d_shared_final: list[float]
    best_epoch: int


def _checksum(net: Network) -> int:
    crc = 0
    for k in sorted(net.params):
        crc = zlib.crc32(net.params[k].tobytes(), crc)
    return crc


def discriminator_means(generator: Network, extractors: Sequence[Network],
                        discriminators: Sequence[Network], data: WindowDataset,
                        batch_size: int = 256) -> tuple[list[float], list[float]]:
    """Mean D_j output on shared features and on G_j features over ``data``."""
    shared = np.zeros(len(discriminators))
    specific = np.zeros(len(discriminators))
    n = 0
    for b in data.iter_batches(batch_size, dtype=generator.dtype):
        f = generator_forward(generator, b.windows)
        for j, (gj, dj) in enumerate(zip(extractors, discriminators)):
            shared[j] += float(discriminator_forward(dj, f).sum())
            specific[j] += float(discriminator_forward(dj, generator_forward(gj, b.windows)).sum())
        n += len(b)
    return list(shared / n), list(specific / n)


def train_adversarial(train: WindowDataset, extractors: Sequence[Network], config: TrainConfig,
                      init: tuple[Network, Network] | None = None,
                      val: WindowDataset | None = None, target: str = "target",
                      log: Logger | None = None) -> AdversarialResult:
    """Train the target (G, C) against one discriminator per frozen extractor.

    ``init`` supplies starting networks (copied, typically the target
    appliance's pretrained pair) when ``config.warm_start`` is set; otherwise
    fresh networks are drawn exactly as :func:`pretrain_appliance` would.
    With ``config.adversarial`` off only ``lam * L_pred`` is minimised.
    """
    extractors = list(extractors)
    if not extractors:
        raise TrainingError("adversarial training needs at least one pretrained generator")
    if len(train) == 0:
        raise TrainingError("empty training set")
    W = train.window_size
    for j, gj in enumerate(extractors):
        if gj.config["W"] != W:
            raise ad.ShapeError(f"extractor {j} expects W={gj.config['W']}, data has W={W}")
    if config.warm_start and init is not None:
        generator, predictor = init[0].copy(), init[1].copy()
    else:
        generator, predictor = _init_pair(W, config, target)
    if generator.config["feature_len"] != extractors[0].config["feature_len"]:
        raise ad.ShapeError("target generator and extractors disagree on feature length")
    dtype = np.float32 if config.precision == "f32" else np.float64
    generator, predictor = generator.astype(dtype), predictor.astype(dtype)
    extractors = [g.astype(dtype) if g.dtype != dtype else g for g in extractors]

    if not config.adversarial:
        res = _prediction_loop(train, val, config, generator, predictor, "pretrain", config.lam, log,
                               {"appliance": target, "adversarial": False})
        return AdversarialResult(res.generator, res.predictor, [], res.loss_trace, res.val_mae_trace,
                                 res.history, [], res.best_epoch)

    sums = [_checksum(g) for g in extractors]
    F = generator.config["feature_len"]
    discriminators = [build_discriminator(F, derive_seed(config.seed, target, "D", j), config.precision,
                                          config.discriminator_widths, config.dropout)
                      for j in range(len(extractors))]
    d_states = [config.adam() for _ in discriminators]
    gc_state = config.adam()
    rng = np.random.default_rng(derive_seed(config.seed, "adversarial", "data"))
    stopper = _EarlyStopper(config.patience)
    val_small = val.subsample(config.val_max_windows) if val is not None else None
    loss_trace, val_trace, history = [], [], []
    step = 0
    for epoch in range(1, config.max_epochs + 1):
        pred_losses, d_losses, g_advs = [], [], []
        shared_sum = np.zeros(len(discriminators))
        n_seen = 0
        for batch in train.iter_batches(config.batch_size, rng, dtype):
            step += 1
            last_good = stopper.snapshot or {"generator": generator, "predictor": predictor}
            specific = [generator_forward(gj, batch.windows) for gj in extractors]
            gn, cn = generator.bind(True), predictor.bind(True)
            feats = generator_graph(generator, ad.Node(batch.windows), gn, training=True)
            shared = ad.Node(feats.value)
            adv_terms = []
            d_loss_total = 0.0
            for j, dj in enumerate(discriminators):
                dn = dj.bind(True)
                p_sh = discriminator_graph(dj, shared, dn, training=True, rng=rng)
                p_sp = discriminator_graph(dj, ad.Node(specific[j]), dn, training=True, rng=rng)
                d_obj = ad.add(ad.mean(ad.log(p_sh)), ad.mean(ad.log(ad.sub(1.0, p_sp))))
                d_loss = ad.scale(d_obj, -1.0)  # ascend the adversarial objective
                _finite(float(d_loss.value), "discriminator loss", epoch, last_good)
                grads = ad.backward(d_loss)
                adam_step(dj.params, {k: grads[n] for k, n in dn.items()}, d_states[j])
                d_loss_total += float(d_loss.value)
                if step > config.disc_warmup:
                    p = discriminator_graph(dj, feats, dj.bind(False), training=True, rng=rng)
                    if config.non_saturating:
                        term = ad.scale(ad.mean(ad.log(ad.sub(1.0, p))), -1.0)
                    else:
                        term = ad.mean(ad.log(p))
                    adv_terms.append(term)
                    shared_sum[j] += float(p.value.sum())
                else:
                    shared_sum[j] += float(p_sh.value.sum())
            n_seen += len(batch)
            pred = predictor_graph(predictor, feats, cn, training=True, rng=rng)
            lp = ad.mse(pred, ad.Node(batch.targets))
            _finite(float(lp.value), "prediction loss", epoch, last_good)
            total = ad.scale(lp, config.lam)
            g_adv = 0.0
            for term in adv_terms:
                total = ad.add(total, term)
                g_adv += float(term.value)
            if step > config.disc_warmup:
                grads = ad.backward(total)
                params = {**_prefixed(generator, "G"), **_prefixed(predictor, "C")}
                adam_step(params, {**_grads_by_name(grads, gn, "G"), **_grads_by_name(grads, cn, "C")},
                          gc_state)
            pred_losses.append(float(lp.value))
            d_losses.append(d_loss_total)
            g_advs.append(g_adv)
        loss_trace.extend(pred_losses)
        score = (evaluate_mae(generator, predictor, val_small) if val_small is not None
                 else float(np.mean(pred_losses)))
        val_trace.append(score)
        record = {"stage": "adversarial", "appliance": target, "epoch": epoch,
                  "train_loss": float(np.mean(pred_losses)), "d_loss": float(np.mean(d_losses)),
                  "g_adv": float(np.mean(g_advs)), "val_mae": score,
                  "d_mean_shared": [float(x) for x in shared_sum / max(n_seen, 1)]}
        history.append(record)
        if log:
            log(record)
        if stopper.update(epoch, score, {"generator": generator, "predictor": predictor}):
            break

    if [_checksum(g) for g in extractors] != sums:
        raise TrainingError("frozen extractor parameters changed during adversarial training")
    best = stopper.snapshot
    probe = val_small if val_small is not None else train.subsample(2000)
    d_shared, _ = discriminator_means(best["generator"], extractors, discriminators, probe)
    return AdversarialResult(best["generator"], best["predictor"], discriminators, loss_trace,
                             val_trace, history, d_shared, stopper.best_epoch)
