"""Denial-of-service schedules on directed channels.

A channel is the pair ``(receiver, sender)``; an attack on it blocks the
information flowing from ``sender`` to ``receiver``. Attack intervals are
half-open ``[start, end)`` in seconds.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

Channel = tuple[int, int]
Interval = tuple[float, float]


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class AttackSchedule:
    intervals: Mapping[Channel, tuple[Interval, ...]]
    horizon: float

    def __post_init__(self):
        if not (self.horizon > 0 and math.isfinite(self.horizon)):
            raise ScheduleError(f"horizon must be positive and finite, got {self.horizon}")
        clean = {}
        for channel, ivs in self.intervals.items():
            channel = (int(channel[0]), int(channel[1]))
            ivs = tuple((float(a), float(b)) for a, b in ivs)
            prev_end = None
            for a, b in ivs:
                if not b > a:
                    raise ScheduleError(f"channel {channel}: empty or reversed interval [{a}, {b})")
                if a < 0 or b > self.horizon:
                    raise ScheduleError(
                        f"channel {channel}: interval [{a}, {b}) leaves [0, {self.horizon})"
                    )
                if prev_end is not None and not a > prev_end:
                    raise ScheduleError(
                        f"channel {channel}: intervals must be strictly increasing and disjoint "
                        f"(start {a} does not follow end {prev_end})"
                    )
                prev_end = b
            if ivs:
                clean[channel] = ivs
        object.__setattr__(self, "intervals", clean)

    @classmethod
    def from_pairs(cls, pairs: Mapping[Channel, Sequence[Sequence[float]]], horizon: float):
        """Build from ``[start, duration]`` pairs per channel."""
        return cls({ch: tuple((a, a + tau) for a, tau in sorted(p)) for ch, p in pairs.items()}, horizon)

    @classmethod
    def empty(cls, horizon: float):
        return cls({}, horizon)

    @property
    def channels(self) -> tuple[Channel, ...]:
        return tuple(sorted(self.intervals))

    def endpoints(self) -> list[float]:
        pts = {0.0, float(self.horizon)}
        for ivs in self.intervals.values():
            for a, b in ivs:
                pts.update((a, b))
        return sorted(pts)

    def to_pairs(self) -> dict[str, list[list[float]]]:
        return {f"{r},{s}": [[a, b - a] for a, b in ivs] for (r, s), ivs in sorted(self.intervals.items())}


@dataclass(frozen=True)
class AttackBudget:
    N0: float
    T_f: float
    T0: float
    T_a: float

    def __post_init__(self):
        if not self.T_f > 0:
            raise ScheduleError(f"T_f must be positive, got {self.T_f}")
        if not self.T_a > 1:
            raise ScheduleError(f"T_a must exceed 1, got {self.T_a}")
        if self.N0 < 0 or self.T0 < 0:
            raise ScheduleError("N0 and T0 must be non-negative")


def merge_intervals(intervals: Iterable[Interval]) -> list[Interval]:
    out: list[list[float]] = []
    for a, b in sorted(intervals):
        if out and a <= out[-1][1]:
            out[-1][1] = max(out[-1][1], b)
        else:
            out.append([a, b])
    return [(a, b) for a, b in out]


def restrict(intervals: Iterable[Interval], T1: float, T2: float) -> list[Interval]:
    out = []
    for a, b in intervals:
        lo, hi = max(a, T1), min(b, T2)
        if hi > lo:
            out.append((lo, hi))
    return out


def union_attack_intervals(s: AttackSchedule) -> list[Interval]:
    """Merged union of all channel intervals: the global attack mode."""
    return merge_intervals(iv for ivs in s.intervals.values() for iv in ivs)


def in_union(union: Sequence[Interval], t: float) -> bool:
    return any(a <= t < b for a, b in union)


def active_channels(s: AttackSchedule, t: float) -> frozenset:
    if not 0 <= t < s.horizon:
        raise ScheduleError(f"time {t} outside the schedule horizon [0, {s.horizon})")
    return frozenset(ch for ch, ivs in s.intervals.items() if any(a <= t < b for a, b in ivs))


def _check_window(T1, T2):
    if not (T2 > T1 >= 0):
        raise ScheduleError(f"window needs T2 > T1 >= 0, got [{T1}, {T2})")


def frequency_stats(s: AttackSchedule, T1: float, T2: float) -> tuple[int, float]:
    """Number of global attack intervals meeting ``[T1, T2)`` and their rate."""
    _check_window(T1, T2)
    count = sum(1 for a, b in union_attack_intervals(s) if a < T2 and b > T1)
    return count, count / (T2 - T1)


def duration_stats(s: AttackSchedule, T1: float, T2: float) -> float:
    _check_window(T1, T2)
    return float(sum(b - a for a, b in restrict(union_attack_intervals(s), T1, T2)))


def channel_stats(s: AttackSchedule) -> dict[str, dict]:
    """Per-channel counts and attacked time (informational)."""
    return {
        f"{r},{q}": {"count": len(ivs), "duration": float(sum(b - a for a, b in ivs))}
        for (r, q), ivs in sorted(s.intervals.items())
    }


def verify_budget(s: AttackSchedule, b: AttackBudget) -> dict:
    """Check the frequency and duration budgets over every window.

    Both budgets are piecewise linear in the window ends, so the worst windows
    are found exactly among interval endpoints: for frequency, windows from
    just before the end of one interval to just after the start of a later one;
    for duration, windows from an interval start to a later interval end.
    """
    union = union_attack_intervals(s)
    worst_f = {"excess": -math.inf, "window": None, "count": 0}
    worst_d = {"excess": -math.inf, "window": None, "duration": 0.0}
    if not union:
        worst_f = {"excess": -b.N0, "window": None, "count": 0}
        worst_d = {"excess": -b.T0, "window": None, "duration": 0.0}
    starts = np.array([a for a, _ in union])
    ends = np.array([e for _, e in union])
    lengths = ends - starts
    cum = np.concatenate([[0.0], np.cumsum(lengths)])
    for k in range(len(union)):
        for m in range(k, len(union)):
            count = m - k + 1
            span = 0.0 if m == k else starts[m] - ends[k]
            excess = count - (b.N0 + span / b.T_f)
            if excess > worst_f["excess"]:
                window = [starts[k], ends[k]] if m == k else [ends[k], starts[m]]
                worst_f = {"excess": float(excess), "window": [float(w) for w in window], "count": count}
            attacked = cum[m + 1] - cum[k]
            excess = attacked - (b.T0 + (ends[m] - starts[k]) / b.T_a)
            if excess > worst_d["excess"]:
                worst_d = {"excess": float(excess), "window": [float(starts[k]), float(ends[m])],
                           "duration": float(attacked)}
    return {
        "frequency_ok": bool(worst_f["excess"] <= 0),
        "duration_ok": bool(worst_d["excess"] <= 0),
        "worst_windows": {"frequency": worst_f, "duration": worst_d},
    }


# flag protocol -------------------------------------------------------------


@dataclass(frozen=True)
class AttackFlagState:
    """Per-channel flags: 0 clear, 1 loss detected by the receiver, -1 notified."""

    psi: Mapping[Channel, int] = field(default_factory=dict)

    @classmethod
    def initial(cls, channels: Iterable[Channel]):
        return cls({tuple(ch): 0 for ch in channels})

    def adjacency(self) -> dict[Channel, int]:
        return {ch: 0 if v else 1 for ch, v in self.psi.items()}

    def surviving(self) -> frozenset:
        return frozenset(ch for ch, v in self.psi.items() if v == 0)


def step_flags(state: AttackFlagState, attacked: Iterable[Channel]):
    """Advance the flags by one synchronous step.

    An attacked channel gets flag 1. A clear channel whose reverse channel
    carried a detected loss in the previous step gets -1: its sender has been
    told the link is down and stops using it. Every other channel is 0. The
    effective adjacency is 0 exactly where the flag is non-zero.
    """
    attacked = {tuple(ch) for ch in attacked}
    unknown = attacked - set(state.psi)
    if unknown:
        raise ScheduleError(f"unknown channels {sorted(unknown)}")
    new = {}
    for ch in state.psi:
        reverse = (ch[1], ch[0])
        if ch in attacked:
            new[ch] = 1
        elif state.psi.get(reverse) == 1 and reverse in attacked:
            new[ch] = -1
        else:
            new[ch] = 0
    out = AttackFlagState(new)
    return out, out.adjacency()


def surviving_sets(s: AttackSchedule, channels: Sequence[Channel]) -> set[frozenset]:
    """Every surviving-channel set the flag protocol can produce under ``s``."""
    channel_set = set(channels)
    out = set()
    for t in s.endpoints()[:-1]:
        attacked = active_channels(s, t)
        if not attacked:
            continue
        detected = frozenset(channel_set - attacked)
        notified = frozenset(
            ch for ch in detected if not ((ch[1], ch[0]) in attacked)
        )
        out.update((detected, notified))
    return out


# generators ----------------------------------------------------------------


def generate_schedule(
    budget: AttackBudget,
    horizon: float,
    channels: Sequence[Channel],
    seed: int = 0,
    bursts: str = "all",
    max_tries: int = 200,
) -> AttackSchedule:
    """Random schedule that satisfies ``budget``.

    Attack bursts start at gaps drawn from ``[T_f, 1.5 T_f]`` and last at most
    ``min(gap / T_a, T0)``, which meets both budgets whenever ``N0 >= 1``;
    candidates are still checked with :func:`verify_budget` and resampled on
    failure. ``bursts="all"`` hits every channel in each burst,
    ``"subset"`` a random non-empty subset.
    """
    if bursts not in ("all", "subset"):
        raise ScheduleError(f"bursts must be 'all' or 'subset', got {bursts!r}")
    channels = [tuple(ch) for ch in channels]
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        per_channel: dict[Channel, list[Interval]] = {ch: [] for ch in channels}
        t = rng.uniform(0.0, budget.T_f)
        while t < horizon:
            gap = budget.T_f * rng.uniform(1.0, 1.5)
            dur = min(gap / budget.T_a, budget.T0) * rng.uniform(0.5, 1.0)
            end = min(t + dur, horizon)
            if end > t:
                if bursts == "all":
                    hit = channels
                else:
                    mask = rng.random(len(channels)) < 0.5
                    if not mask.any():
                        mask[rng.integers(len(channels))] = True
                    hit = [ch for ch, m in zip(channels, mask) if m]
                for ch in hit:
                    per_channel[ch].append((t, end))
            t += gap
        sched = AttackSchedule({ch: tuple(iv) for ch, iv in per_channel.items()}, horizon)
        report = verify_budget(sched, budget)
        if report["frequency_ok"] and report["duration_ok"]:
            return sched
    raise ScheduleError(f"no schedule satisfying {budget} found in {max_tries} tries")


def staggered_schedule(
    channels: Sequence[Channel], horizon: float, duty: float = 0.9, period: float = 10.0
) -> AttackSchedule:
    """Periodic attacks on every channel with evenly staggered phases.

    Each channel is attacked a fraction ``duty`` of every period; channel k
    has its clear window at ``[k P / m, k P / m + (1 - duty) P)`` of each
    period.
    """
    if not 0 < duty < 1:
        raise ScheduleError("duty must lie in (0, 1)")
    channels = [tuple(ch) for ch in channels]
    m = len(channels)
    out = {}
    for k, ch in enumerate(channels):
        phase = k * period / m
        ivs = []
        p = -1
        while p * period + phase < horizon:
            a = max(0.0, p * period + phase + (1 - duty) * period)
            b = min(horizon, (p + 1) * period + phase)
            if b > a:
                ivs.append((a, b))
            p += 1
        out[ch] = tuple(merge_intervals(ivs))
    return AttackSchedule(out, horizon)


def budget_from_thresholds(
    T_f_star: float, T_a_star: float, margin_f: float = 1.5, margin_a: float = 2.0, N0: float = 1.0
) -> AttackBudget:
    """Budget sitting a margin above the frequency and duration thresholds."""
    T_f = margin_f * T_f_star
    T_a = max(margin_a * T_a_star, 1.0 + 1e-9)
    return AttackBudget(N0=N0, T_f=T_f, T0=1.5 * T_f / T_a, T_a=T_a)


def snap_schedule(s: AttackSchedule, step: float) -> tuple[AttackSchedule, float]:
    """Round every endpoint to the integration grid; returns the max shift."""
    shift = 0.0
    out = {}
    last = math.floor(s.horizon / step + 1e-9) * step
    for ch, ivs in s.intervals.items():
        snapped = []
        for a, b in ivs:
            sa = min(round(a / step) * step, last)
            sb = min(round(b / step) * step, last)
            shift = max(shift, abs(sa - a), abs(sb - b))
            if sb > sa:
                snapped.append((sa, sb))
        out[ch] = tuple(merge_intervals(snapped))
    return AttackSchedule(out, s.horizon), shift


def subtract_schedule_window(s: AttackSchedule, T1: float, T2: float) -> Optional[AttackSchedule]:
    """Schedule restricted to ``[T1, T2)`` and shifted to start at 0."""
    _check_window(T1, T2)
    return AttackSchedule(
        {ch: tuple((a - T1, b - T1) for a, b in restrict(ivs, T1, T2)) for ch, ivs in s.intervals.items()},
        T2 - T1,
    )
