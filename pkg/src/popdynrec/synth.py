"""Synthetic interaction logs with planted item life cycles.

Each item follows a popularity hazard curve from one family (rising,
decaying, cyclic). Daily item demand mixes the normalised hazard (weight
``trend_strength``) with a flat component, events are drawn as Poisson counts
per (day, item) and assigned to users active that day.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .ingest import Interaction, InteractionDataset, from_interactions

DAY = 86_400
EPOCH = 1_600_000_000
FAMILIES = ("rising", "decaying", "cyclic")


@dataclass(frozen=True)
class SynthSpec:
    n_users: int = 2000
    n_items: int = 500
    horizon_days: int = 728
    events_per_user: float = 20.0
    trend_strength: float = 0.8
    family_weights: tuple = (1 / 3, 1 / 3, 1 / 3)
    timescale_days: tuple = (10.0, 60.0)
    user_span_days: tuple = (90.0, 728.0)
    cycle_sharpness: float = 4.0
    id_prefix: str = ""

    def __post_init__(self):
        if self.n_users < 1 or self.n_items < 1 or self.horizon_days < 1:
            raise ConfigError("synthetic spec needs at least one user, item and day")
        if not 0.0 <= self.trend_strength <= 1.0:
            raise ConfigError("trend_strength must lie in [0, 1]")
        if len(self.family_weights) != len(FAMILIES) or min(self.family_weights) < 0 \
                or sum(self.family_weights) <= 0:
            raise ConfigError(f"family_weights needs {len(FAMILIES)} non-negative weights")
        if self.events_per_user <= 0:
            raise ConfigError("events_per_user must be positive")


def hazard_curves(spec: SynthSpec, rng: np.random.Generator):
    """(days, items) hazard matrix in [0, 1] and each item's family index."""
    H, N = spec.horizon_days, spec.n_items
    w = np.asarray(spec.family_weights, dtype=np.float64)
    family = rng.choice(len(FAMILIES), size=N, p=w / w.sum())
    lo, hi = spec.timescale_days
    tau = rng.uniform(lo, hi, size=N)
    launch = rng.uniform(-0.25 * H, H, size=N)
    period = rng.uniform(4 * lo, 4 * hi, size=N)
    phase = rng.uniform(0, 2 * np.pi, size=N)
    t = np.arange(H, dtype=np.float64)[:, None]
    age = t - launch[None, :]
    # rising items ramp up exponentially towards a peak reached `to_peak` days after launch
    to_peak = rng.uniform(0.5 * H, 1.5 * H, size=N)
    rising = np.where(age >= 0, np.exp(-np.maximum(to_peak - age, 0) / (3 * tau)), 0.0)
    decaying = np.where(age >= 0, np.exp(-np.maximum(age, 0) / tau), 0.0)
    cyclic = ((1 + np.sin(2 * np.pi * t / period + phase)) / 2) ** spec.cycle_sharpness
    curves = np.stack([rising, decaying, cyclic])  # (3, H, N)
    haz = np.take_along_axis(curves, family[None, None, :].repeat(H, axis=1), axis=0)[0]
    return haz, family


def synth_generate(spec: SynthSpec, seed: int = 0) -> InteractionDataset:
    if spec.n_users < 1 or spec.n_items < 1:
        raise ConfigError("degenerate synthetic spec")
    rng = np.random.default_rng([int(seed), 7919])
    H, N, U = spec.horizon_days, spec.n_items, spec.n_users
    haz, _ = hazard_curves(spec, rng)
    scale = rng.lognormal(0.0, 0.5, size=N)
    trend = haz * scale[None, :]
    mean_trend = trend.mean()
    rate = spec.trend_strength * trend / (mean_trend if mean_trend > 0 else 1.0) \
        + (1.0 - spec.trend_strength)
    rate *= U * spec.events_per_user / rate.sum()
    counts = rng.poisson(rate)  # (H, N)

    start = rng.uniform(-spec.user_span_days[0], H, size=U)
    span = rng.uniform(*spec.user_span_days, size=U)
    activity = rng.lognormal(0.0, 0.7, size=U)

    prefix = f"{spec.id_prefix}s{seed}"
    rows = []
    all_users = np.arange(U)
    for day in range(H):
        day_items = np.repeat(np.arange(N), counts[day])
        if not len(day_items):
            continue
        active = all_users[(start <= day) & (day < start + span)]
        if not len(active):
            active = all_users
        p = activity[active] / activity[active].sum()
        users = rng.choice(active, size=len(day_items), p=p)
        secs = rng.integers(0, DAY, size=len(day_items))
        ts = EPOCH + day * DAY + secs
        for u, i, t in zip(users.tolist(), day_items.tolist(), ts.tolist()):
            rows.append((t, u, i))
    rows.sort()
    return from_interactions(Interaction(f"{prefix}_u{u}", f"{prefix}_i{i}", t) for t, u, i in rows)
