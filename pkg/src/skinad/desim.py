"""Three-station production line with finite buffers and blocking.

Parts arrive as a Poisson stream and are dropped when the first station is
full.  Each station has one FIFO server; a part that finishes service while
the next station is full stays on its server (blocking) until space frees.
Station capacity counts every part present, including the one on the
server.

Two engines share the same input draws: a compiled departure-time
recursion used for production runs, and an event-list simulator with
optional conservation accounting used as a reference.
"""

from __future__ import annotations

import heapq
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numba
import numpy as np
from scipy.special import gammaincinv

from .errors import EmptySampleError, InputError

REAL = "real"
INADEQUATE = "inadequate"
INDEPENDENT = "independent"
CRN = "crn"


@dataclass(frozen=True)
class Exponential:
    mean: float

    def __post_init__(self):
        if not self.mean > 0:
            raise InputError(f"exponential mean must be positive, got {self.mean}")

    def from_uniform(self, u: np.ndarray) -> np.ndarray:
        return -self.mean * np.log1p(-u)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.exponential(self.mean, size)


@dataclass(frozen=True)
class Gamma:
    """Gamma service time given by its mean and variance."""

    mean: float
    variance: float

    def __post_init__(self):
        if not (self.mean > 0 and self.variance > 0):
            raise InputError(f"gamma mean and variance must be positive, got {self.mean}, {self.variance}")

    @property
    def shape(self) -> float:
        return self.mean**2 / self.variance

    @property
    def scale(self) -> float:
        return self.variance / self.mean

    def from_uniform(self, u: np.ndarray) -> np.ndarray:
        return gammaincinv(self.shape, u) * self.scale

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.gamma(self.shape, self.scale, size)


@dataclass(frozen=True)
class Station:
    service: Exponential | Gamma
    capacity: int = 5

    def __post_init__(self):
        if int(self.capacity) != self.capacity or self.capacity < 1:
            raise InputError(f"station capacity must be a positive integer, got {self.capacity}")


@dataclass(frozen=True)
class LineConfig:
    stations: tuple
    arrival_rate: float = 1.0
    horizon: float = 60000.0

    def __post_init__(self):
        object.__setattr__(self, "stations", tuple(self.stations))
        if not self.stations:
            raise InputError("line needs at least one station")
        if not self.arrival_rate > 0:
            raise InputError(f"arrival rate must be positive, got {self.arrival_rate}")
        if not self.horizon > 0:
            raise InputError(f"horizon must be positive, got {self.horizon}")


@dataclass(frozen=True)
class RngPolicy:
    """Stream selection.

    Under ``crn`` replication j draws from the same streams at every design
    point.  Under ``independent`` the streams are keyed by
    (point_index, replication_index) and are disjoint.
    """

    mode: str = INDEPENDENT
    master_seed: int = 0
    replication_index: int = 0
    point_index: int = 0

    def __post_init__(self):
        if self.mode not in (INDEPENDENT, CRN):
            raise InputError(f"unknown rng mode {self.mode!r}")

    def streams(self, n_stations: int) -> list[np.random.Generator]:
        if self.mode == CRN:
            seq = np.random.SeedSequence([self.master_seed, 0, self.replication_index])
        else:
            seq = np.random.SeedSequence([self.master_seed, 1, self.point_index, self.replication_index])
        return [np.random.default_rng(s) for s in seq.spawn(1 + n_stations)]


class SojournResult(NamedTuple):
    mean_sojourn: float
    count: int


def line_for(x, model: str, horizon: float = 60000.0, arrival_rate: float = 1.0, capacity: int = 5) -> LineConfig:
    """Line for design variable x = (means of stations 1-3, variances of stations 1-3).

    The real system uses gamma service; the inadequate model uses
    exponential service and reads only the means.
    """
    x = np.asarray(x, dtype=float).ravel()
    if x.size != 6:
        raise InputError(f"design variable must have 6 coordinates, got {x.size}")
    if model == REAL:
        dists = [Gamma(x[s], x[s + 3]) for s in range(3)]
    elif model == INADEQUATE:
        dists = [Exponential(x[s]) for s in range(3)]
    else:
        raise InputError(f"model must be {REAL!r} or {INADEQUATE!r}, got {model!r}")
    return LineConfig(tuple(Station(d, capacity) for d in dists), arrival_rate, horizon)


def draw_inputs(cfg: LineConfig, rng: RngPolicy):
    """Arrival times in [0, T] and an (n_stations, n_arrivals) service matrix.

    Row s, column a holds the service time at station s of the part that
    arrives a-th, whether or not it is admitted, so the draws line up across
    configurations.  CRN mode maps shared uniforms through each inverse CDF;
    independent mode samples each family directly.
    """
    gens = rng.streams(len(cfg.stations))
    mean_gap = 1.0 / cfg.arrival_rate
    chunk = int(cfg.horizon * cfg.arrival_rate + 10 * np.sqrt(cfg.horizon * cfg.arrival_rate) + 16)
    gaps = gens[0].exponential(mean_gap, chunk)
    times = np.cumsum(gaps)
    while times[-1] <= cfg.horizon:
        more = np.cumsum(gens[0].exponential(mean_gap, chunk)) + times[-1]
        times = np.concatenate([times, more])
    arrivals = times[: np.searchsorted(times, cfg.horizon, side="right")]
    n = arrivals.size
    services = np.empty((len(cfg.stations), n))
    for s, st in enumerate(cfg.stations):
        if rng.mode == CRN:
            services[s] = st.service.from_uniform(gens[1 + s].random(n))
        else:
            services[s] = st.service.sample(gens[1 + s], n)
    return arrivals, services


@numba.njit(cache=True, nogil=True)
def _recursion(arrivals, services, capacity, horizon):
    n_st, n_arr = services.shape
    D = np.empty((n_arr, n_st))
    accepted = 0
    total = 0.0
    count = 0
    for a in range(n_arr):
        t = arrivals[a]
        c1 = capacity[0]
        if accepted >= c1 and D[accepted - c1, 0] > t:
            continue
        j = accepted
        accepted += 1
        enter = t
        for s in range(n_st):
            start = enter
            if j >= 1 and D[j - 1, s] > start:
                start = D[j - 1, s]
            finish = start + services[s, a]
            if s + 1 < n_st:
                c = capacity[s + 1]
                if j >= c and D[j - c, s + 1] > finish:
                    finish = D[j - c, s + 1]
            D[j, s] = finish
            enter = finish
        if enter <= horizon:
            total += enter - t
            count += 1
    return total, count


def _finish(total: float, count: int) -> SojournResult:
    if count == 0:
        raise EmptySampleError("no part left the line within the horizon")
    return SojournResult(total / count, int(count))


def simulate_sojourn(cfg: LineConfig, rng: RngPolicy) -> SojournResult:
    """Average sojourn of the parts that leave the line by the horizon."""
    arrivals, services = draw_inputs(cfg, rng)
    capacity = np.array([st.capacity for st in cfg.stations], dtype=np.int64)
    total, count = _recursion(arrivals, services, capacity, cfg.horizon)
    return _finish(total, count)


@dataclass
class EventTrace:
    result: SojournResult
    events: int
    arrived: int
    completed: int
    rejected: int
    in_system: int
    checks: int = 0
    # (time, station, arrival number) for each service start, per station
    starts: list = field(default_factory=list)


def simulate_events(cfg: LineConfig, rng: RngPolicy, debug: bool = False,
                    max_events: int | None = None) -> EventTrace:
    """Event-list simulation of the same line on the same draws.

    With ``debug`` the identity arrived = completed + in system + rejected
    is asserted after every event.  Events past the horizon are not run;
    ``max_events`` stops earlier.
    """
    arrivals, services = draw_inputs(cfg, rng)
    n_st = len(cfg.stations)
    cap = [st.capacity for st in cfg.stations]
    parts = [deque() for _ in range(n_st)]  # (arrival number, arrival time)
    busy = [False] * n_st
    blocked = [False] * n_st
    heap: list = []
    seq = 0
    arrived = completed = rejected = 0
    total = 0.0
    trace = EventTrace(SojournResult(0.0, 0), 0, 0, 0, 0, 0)

    def start(s, t):
        nonlocal seq
        if not busy[s] and not blocked[s] and parts[s]:
            a, _ = parts[s][0]
            busy[s] = True
            trace.starts.append((t, s, a))
            heapq.heappush(heap, (t + services[s, a], seq, "done", s))
            seq += 1

    def release(s, t):
        # station s just lost a part; pull the blocked head of s-1 forward
        if s == 0 or not blocked[s - 1]:
            return
        blocked[s - 1] = False
        parts[s].append(parts[s - 1].popleft())
        start(s, t)
        start(s - 1, t)
        release(s - 1, t)

    for a, t in enumerate(arrivals):
        heapq.heappush(heap, (t, seq, "arrive", a))
        seq += 1

    events = 0
    while heap:
        t, _, kind, arg = heapq.heappop(heap)
        if t > cfg.horizon or (max_events is not None and events >= max_events):
            break
        events += 1
        if kind == "arrive":
            arrived += 1
            if len(parts[0]) >= cap[0]:
                rejected += 1
            else:
                parts[0].append((arg, t))
                start(0, t)
        else:
            s = arg
            busy[s] = False
            if s == n_st - 1:
                _, t_in = parts[s].popleft()
                completed += 1
                total += t - t_in
                start(s, t)
                release(s, t)
            elif len(parts[s + 1]) < cap[s + 1]:
                parts[s + 1].append(parts[s].popleft())
                start(s + 1, t)
                start(s, t)
                release(s, t)
            else:
                blocked[s] = True
        if debug:
            in_system = sum(len(q) for q in parts)
            if arrived != completed + in_system + rejected:
                raise AssertionError(f"conservation broken at t={t}: {arrived} != "
                                     f"{completed} + {in_system} + {rejected}")
            if any(len(q) > c for q, c in zip(parts, cap)):
                raise AssertionError(f"capacity exceeded at t={t}")
            trace.checks += 1
    trace.events = events
    trace.arrived, trace.completed, trace.rejected = arrived, completed, rejected
    trace.in_system = sum(len(q) for q in parts)
    if completed:
        trace.result = SojournResult(total / completed, completed)
    return trace


def _map(fn, items, threads: int):
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


def run_design(points, n, model: str, rng: RngPolicy, horizon: float = 60000.0,
               threads: int = 1, first_replication: int = 0, arrival_rate: float = 1.0,
               capacity: int = 5, return_counts: bool = False):
    """Replicated sojourn averages at each design point.

    Point i gets replications first_replication .. first_replication + n_i - 1.
    ``rng`` supplies the mode and master seed; its point and replication
    indices are overwritten.  With ``return_counts`` a second list holds the
    number of parts behind each average.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    n = np.broadcast_to(np.asarray(n, dtype=int), (points.shape[0],))
    cfgs = [line_for(x, model, horizon, arrival_rate, capacity) for x in points]

    def one(i):
        out = np.empty(n[i])
        cnt = np.empty(n[i], dtype=int)
        for r in range(n[i]):
            pol = RngPolicy(rng.mode, rng.master_seed, first_replication + r, i)
            out[r], cnt[r] = simulate_sojourn(cfgs[i], pol)
        return out, cnt

    res = _map(one, range(points.shape[0]), threads)
    outs = [r[0] for r in res]
    return (outs, [r[1] for r in res]) if return_counts else outs


@dataclass
class GroundTruth:
    mean: np.ndarray
    se: np.ndarray
    replications: np.ndarray

    @property
    def relative_se(self) -> np.ndarray:
        return self.se / np.abs(self.mean)


def ground_truth(points, model: str = REAL, *, max_replications: int = 4000, batch: int = 50,
                 rel_se: float = 0.005, seed: int = 0, horizon: float = 60000.0,
                 threads: int = 1, arrival_rate: float = 1.0, capacity: int = 5) -> GroundTruth:
    """High-effort estimates of the expected sojourn with standard errors.

    Each point runs batches of independent replications until its standard
    error falls to ``rel_se`` times the estimate or the replication cap is
    reached.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if batch < 2 or max_replications < batch:
        raise InputError(f"need 2 <= batch <= max_replications, got {batch}, {max_replications}")

    def one(i):
        cfg = line_for(points[i], model, horizon, arrival_rate, capacity)
        vals: list[float] = []
        while len(vals) < max_replications:
            for r in range(len(vals), min(len(vals) + batch, max_replications)):
                vals.append(simulate_sojourn(cfg, RngPolicy(INDEPENDENT, seed, r, i)).mean_sojourn)
            v = np.asarray(vals)
            se = v.std(ddof=1) / np.sqrt(v.size)
            if se <= rel_se * abs(v.mean()):
                break
        v = np.asarray(vals)
        return v.mean(), v.std(ddof=1) / np.sqrt(v.size), v.size

    res = _map(one, range(points.shape[0]), threads)
    return GroundTruth(np.array([r[0] for r in res]), np.array([r[1] for r in res]),
                       np.array([r[2] for r in res]))
