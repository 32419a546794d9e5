"""Synthetic households: appliance traces summed into noisy mains.

Every household obeys ``mains(t) = sum_i appliance_i(t) + noise(t)`` with
Gaussian noise, clamped at zero. Per-appliance traces are returned as ground
truth.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .signals import SignalSeries

KINDS = ("two-state", "cyclic", "multi-phase", "spike")


@dataclass(frozen=True)
class ApplianceModel:
    name: str
    kind: str
    on_power: float = 0.0
    mean_on: float = 1.0
    mean_off: float = 1.0
    phases: tuple[tuple[float, int], ...] = ()
    standby_power: float = 0.0
    jitter: float = 0.1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"appliance kind must be one of {KINDS}, got {self.kind!r}")
        if self.on_power < 0 or self.standby_power < 0:
            raise ValueError(f"{self.name}: powers must be >= 0")
        if self.mean_on < 1 or self.mean_off < 1:
            raise ValueError(f"{self.name}: mean durations must be >= 1 sample")
        if self.kind == "multi-phase":
            if not self.phases:
                raise ValueError(f"{self.name}: multi-phase appliance needs phases")
            for power, dur in self.phases:
                if power < 0 or dur < 1:
                    raise ValueError(f"{self.name}: bad phase ({power}, {dur})")
        if not 0 <= self.jitter < 1:
            raise ValueError(f"{self.name}: jitter must be in [0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "ApplianceModel":
        d = dict(d)
        d["phases"] = tuple((float(p), int(n)) for p, n in d.get("phases", ()))
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["phases"] = [list(p) for p in self.phases]
        return d


@dataclass(frozen=True)
class NoiseModel:
    sigma: float = 0.0

    def __post_init__(self):
        if np.any(np.asarray(self.sigma) < 0):
            raise ValueError("noise sigma must be >= 0")


def _geometric(rng: np.random.Generator, mean: float) -> int:
    return int(rng.geometric(1.0 / mean)) if mean > 1 else 1


def _jittered(rng: np.random.Generator, mean: float, jitter: float) -> int:
    return max(1, int(round(mean * rng.uniform(1 - jitter, 1 + jitter))))


def simulate_appliance(model: ApplianceModel, T: int, rng: np.random.Generator) -> np.ndarray:
    """One appliance's power trace of ``T`` samples."""
    trace = np.full(T, float(model.standby_power))
    p_on = model.mean_on / (model.mean_on + model.mean_off)
    t = 0
    if model.kind == "two-state":
        # alternating renewal process with geometric sojourns, started stationary
        on = rng.random() < p_on
        while t < T:
            d = _geometric(rng, model.mean_on if on else model.mean_off)
            if on:
                trace[t:t + d] = model.on_power
            t += d
            on = not on
    elif model.kind == "cyclic":
        t = int(rng.integers(0, int(model.mean_on + model.mean_off)))
        while t < T:
            d = _jittered(rng, model.mean_on, model.jitter)
            trace[t:t + d] = model.on_power
            t += d + _jittered(rng, model.mean_off, model.jitter)
    elif model.kind == "spike":
        t = _geometric(rng, model.mean_off)
        while t < T:
            d = _jittered(rng, model.mean_on, model.jitter)
            trace[t:t + d] = model.on_power
            t += d + _geometric(rng, model.mean_off)
    else:  # multi-phase
        t = _geometric(rng, model.mean_off)
        while t < T:
            for power, dur in model.phases:
                d = _jittered(rng, dur, model.jitter)
                trace[t:t + d] = power
                t += d
                if t >= T:
                    break
            t += _geometric(rng, model.mean_off)
    return trace


def simulate_household(models, noise: NoiseModel, T: int, seed: int, period: int = 6,
                       start: int = 0) -> tuple[SignalSeries, list[SignalSeries]]:
    """Mains and per-appliance ground truth for one household.

    Deterministic in ``seed``; each appliance and the noise draw from their
    own child streams.
    """
    models = list(models)
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not models:
        raise ValueError("at least one appliance model is required")
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(len(models) + 1)]
    timestamps = start + period * np.arange(T, dtype=np.int64)
    traces = [simulate_appliance(m, T, rng) for m, rng in zip(models, streams)]
    total = np.zeros(T)
    for tr in traces:
        total += tr
    sigma = np.asarray(noise.sigma, dtype=np.float64)
    if np.any(sigma > 0):
        mains = np.maximum(total + streams[-1].standard_normal(T) * sigma, 0.0)
    else:
        mains = total
    appliances = [SignalSeries(timestamps, tr, role="appliance", name=m.name)
                  for m, tr in zip(models, traces)]
    return SignalSeries(timestamps, mains, role="mains", name="mains"), appliances


@dataclass
class Household:
    name: str
    split: str
    seed: int
    mains: SignalSeries
    appliances: dict[str, SignalSeries]


@dataclass
class FleetConfig:
    appliances: list[ApplianceModel]
    noise: NoiseModel = field(default_factory=NoiseModel)
    households: int = 6
    samples: int = 13100
    period: int = 6
    fractions: tuple[float, float, float] = (2 / 3, 1 / 6, 1 / 6)

    def __post_init__(self):
        names = [m.name for m in self.appliances]
        if len(set(names)) != len(names):
            raise ValueError("appliance names must be unique")
        if len(self.fractions) != 3 or any(f < 0 for f in self.fractions) \
                or not math.isclose(sum(self.fractions), 1.0, abs_tol=1e-9):
            raise ValueError(f"split fractions must be 3 non-negative values summing to 1, got {self.fractions}")
        if self.households < 1:
            raise ValueError("need at least one household")

    @classmethod
    def from_dict(cls, d: dict) -> "FleetConfig":
        return cls(
            appliances=[ApplianceModel.from_dict(a) for a in d["appliances"]],
            noise=NoiseModel(float(d.get("noise_sigma", 0.0))),
            households=int(d.get("households", 6)),
            samples=int(d.get("samples", 13100)),
            period=int(d.get("period", 6)),
            fractions=tuple(float(f) for f in d.get("fractions", (2 / 3, 1 / 6, 1 / 6))),
        )

    def to_dict(self) -> dict:
        return {
            "appliances": [a.to_dict() for a in self.appliances],
            "noise_sigma": float(self.noise.sigma),
            "households": self.households,
            "samples": self.samples,
            "period": self.period,
            "fractions": list(self.fractions),
        }


def desk_fleet(**overrides) -> FleetConfig:
    """Three-appliance fleet: cyclic fridge, spiky kettle, multi-phase washer."""
    appliances = [
        ApplianceModel("fridge", "cyclic", on_power=120.0, mean_on=20, mean_off=40, standby_power=2.0),
        ApplianceModel("kettle", "spike", on_power=2000.0, mean_on=20, mean_off=600),
        ApplianceModel("washing_machine", "multi-phase", mean_off=1500, jitter=0.2,
                       phases=((2000.0, 30), (200.0, 60), (500.0, 20), (300.0, 40))),
    ]
    kw = {"appliances": appliances, "noise": NoiseModel(10.0)}
    kw.update(overrides)
    return FleetConfig(**kw)


def split_sizes(n: int, fractions) -> tuple[int, ...]:
    """Largest-remainder apportionment of ``n`` items."""
    raw = [n * f for f in fractions]
    sizes = [int(math.floor(r + 1e-9)) for r in raw]
    rest = n - sum(sizes)
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[:rest]:
        sizes[i] += 1
    return tuple(sizes)


def simulate_fleet(config: FleetConfig, seed: int) -> dict[str, list[Household]]:
    """Disjoint train/validation/test households with derived per-house seeds."""
    sizes = split_sizes(config.households, config.fractions)
    child = np.random.SeedSequence(seed).spawn(config.households)
    seeds = [int(c.generate_state(1, dtype=np.uint32)[0]) for c in child]
    splits: dict[str, list[Household]] = {"train": [], "validation": [], "test": []}
    k = 0
    for split, size in zip(splits, sizes):
        for _ in range(size):
            mains, apps = simulate_household(config.appliances, config.noise, config.samples,
                                             seeds[k], period=config.period)
            splits[split].append(Household(f"house_{k:02d}", split, seeds[k], mains,
                                           {a.name: a for a in apps}))
            k += 1
    return splits
