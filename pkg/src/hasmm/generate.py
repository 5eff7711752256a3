"""Synthetic episodes from the generative process.

Trajectory first (initial state, Gamma sojourns, duration-dependent jumps
until an absorbing state is reached and its own sojourn elapses), then
Poisson sampling times on [0, T_c], then one GP draw per occupancy.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .emission import Segment, sample_segment
from .model import ParameterSet, transition_row

MAX_TRANSITIONS = 10_000


class RunawayEpisode(RuntimeError):
    pass


@dataclass(frozen=True)
class LatentTrajectory:
    states: np.ndarray
    sojourns: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "states", np.asarray(self.states, dtype=int).reshape(-1))
        object.__setattr__(self, "sojourns", np.asarray(self.sojourns, dtype=float).reshape(-1))
        if self.states.shape != self.sojourns.shape or self.states.size == 0:
            raise ValueError("states and sojourns must be nonempty and of equal length")

    @property
    def entry_times(self) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum(self.sojourns)[:-1]])

    @property
    def total(self) -> float:
        return float(self.sojourns.sum())

    def validate(self, n_states: int) -> None:
        x = self.states
        if x[-1] not in (0, n_states - 1):
            raise ValueError("trajectory must end in an absorbing state")
        if np.any((x[:-1] == 0) | (x[:-1] == n_states - 1)):
            raise ValueError("only the last state may be absorbing")
        if np.any(x[1:] == x[:-1]):
            raise ValueError("self transitions are not allowed")
        if np.any(self.sojourns <= 0):
            raise ValueError("sojourns must be positive")

    def state_at(self, t: float) -> int:
        k = int(np.searchsorted(np.cumsum(self.sojourns), t, side="right"))
        return int(self.states[min(k, len(self.states) - 1)])


@dataclass
class Episode:
    id: str
    times: np.ndarray
    values: np.ndarray  # (Q, M)
    censor_time: float
    label: int  # 0-based absorbing state
    truth: LatentTrajectory | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float).reshape(-1)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim == 1:
            self.values = self.values.reshape(1, -1)
        if self.values.shape[1] != self.times.shape[0]:
            raise ValueError("values must have one column per timestamp")
        if self.times.size > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")
        if self.times.size and (self.times[0] < 0 or self.times[-1] > self.censor_time):
            raise ValueError("observation times must lie in [0, censor_time]")

    @property
    def n_obs(self) -> int:
        return self.times.shape[0]

    def prefix(self, m: int) -> "Episode":
        return Episode(self.id, self.times[:m], self.values[:, :m], self.censor_time, self.label, self.truth)

    def segment(self, lo: int, hi: int) -> Segment:
        return Segment(self.times[lo:hi], self.values[:, lo:hi])

    def to_dict(self) -> dict:
        vals = [[None if np.isnan(v) else float(v) for v in row] for row in self.values]
        d = {
            "id": self.id,
            "times": [float(t) for t in self.times],
            "values": vals,
            "censor_time": float(self.censor_time),
            "label": int(self.label) + 1,
        }
        if self.truth is not None:
            d["truth"] = {
                "states": [int(x) + 1 for x in self.truth.states],
                "sojourns": [float(s) for s in self.truth.sojourns],
            }
        return d

    @classmethod
    def from_dict(cls, d: dict, n_streams: int | None = None) -> "Episode":
        allowed = {"id", "times", "values", "censor_time", "label", "truth"}
        unknown = set(d) - allowed
        if unknown:
            raise ValueError(f"unknown episode keys: {sorted(unknown)}")
        times = np.asarray(d["times"], dtype=float)
        rows = d["values"]
        if n_streams is None:
            n_streams = len(rows) if rows else 1
        if len(rows) == 0:
            values = np.zeros((n_streams, times.size))
        else:
            values = np.array([[np.nan if v is None else v for v in row] for row in rows], dtype=float)
        truth = None
        if d.get("truth") is not None:
            truth = LatentTrajectory(np.asarray(d["truth"]["states"]) - 1, d["truth"]["sojourns"])
        return cls(str(d["id"]), times, values, float(d["censor_time"]), int(d["label"]) - 1, truth)


def sample_sampling_times(zeta: float, horizon: float, rng: np.random.Generator) -> np.ndarray:
    """Homogeneous Poisson arrivals on [0, horizon], sorted."""
    if zeta <= 0:
        raise ValueError("zeta must be positive")
    if horizon <= 0:
        return np.zeros(0)
    count = rng.poisson(zeta * horizon)
    return np.sort(rng.uniform(0.0, horizon, size=count))


def sample_trajectory(params: ParameterSet, rng: np.random.Generator, start: int | None = None) -> LatentTrajectory:
    n = params.n_states
    x = int(rng.choice(n, p=params.initial)) if start is None else int(start)
    states, sojourns = [], []
    for _ in range(MAX_TRANSITIONS):
        s = rng.gamma(params.shape[x], 1.0 / params.rate[x])
        states.append(x)
        sojourns.append(s)
        if params.is_absorbing(x):
            return LatentTrajectory(states, sojourns)
        g = transition_row(params, x, [s])[0]
        x = int(rng.choice(n, p=g / g.sum()))
    raise RunawayEpisode(f"trajectory exceeded {MAX_TRANSITIONS} transitions (states so far: {states[:20]}...)")


def episode_from_trajectory(params: ParameterSet, traj: LatentTrajectory, rng: np.random.Generator,
                            ep_id: str = "0", missing: float | np.ndarray = 0.0) -> Episode:
    t_c = traj.total
    times = sample_sampling_times(params.zeta, t_c, rng)
    q = params.n_streams
    values = np.empty((q, times.size))
    bounds = np.concatenate([[0.0], np.cumsum(traj.sojourns)])
    idx = np.searchsorted(times, bounds, side="left")
    idx[-1] = times.size
    for n, x in enumerate(traj.states):
        lo, hi = idx[n], idx[n + 1]
        if hi > lo:
            values[:, lo:hi] = sample_segment(params.emission[x], times[lo:hi], rng).values
    missing = np.broadcast_to(np.asarray(missing, dtype=float), (q,))
    if np.any(missing > 0):
        drop = rng.uniform(size=values.shape) < missing[:, None]
        values[drop] = np.nan
        keep = ~np.all(np.isnan(values), axis=0)
        times, values = times[keep], values[:, keep]
    return Episode(ep_id, times, values, t_c, int(traj.states[-1]), traj)


def generate_episode(params: ParameterSet, rng: np.random.Generator, ep_id: str = "0",
                     missing: float | np.ndarray = 0.0) -> Episode:
    traj = sample_trajectory(params, rng)
    return episode_from_trajectory(params, traj, rng, ep_id, missing)


def episode_rngs(seed, count: int) -> list:
    """Independent per-episode generators spawned from one master seed."""
    if isinstance(seed, np.random.Generator):
        seed = int(seed.integers(2**63))
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return [np.random.default_rng(c) for c in ss.spawn(count)]


def generate_dataset(params: ParameterSet, count: int, seed, missing: float = 0.0,
                     prefix: str = "ep") -> list:
    if count < 1:
        raise ValueError("count must be at least 1")
    return [
        generate_episode(params, r, f"{prefix}{k:05d}", missing)
        for k, r in enumerate(episode_rngs(seed, count))
    ]


# -- JSON Lines ----------------------------------------------------------------

def write_episodes(episodes, path, header: dict | None = None) -> None:
    with open(path, "w") as fh:
        if header is not None:
            fh.write(json.dumps({"provenance": header}, sort_keys=True) + "\n")
        for ep in episodes:
            fh.write(json.dumps(ep.to_dict(), sort_keys=True) + "\n")


def read_episodes(path, n_streams: int | None = None) -> list:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            if "provenance" in d and len(d) == 1:
                continue
            try:
                out.append(Episode.from_dict(d, n_streams))
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed episode ({exc})") from exc
    return out
