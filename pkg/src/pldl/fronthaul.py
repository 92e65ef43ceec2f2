"""Fronthaul topology traffic arithmetic and distributed uplink combining.

Link loads are fluid average rates in integer bits/second over star,
daisy-chain and tree layouts, under either raw sample forwarding or
fixed-size combine messages. The combining itself is sufficient-statistic
accumulation (s_hy = sum conj(h)*y, s_hh = sum |h|^2) folded along a
chain; it reproduces the centralized maximum-ratio estimate exactly while
every hop forwards one constant-size message.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence


class NoEnergy(ZeroDivisionError):
    pass


# s_hy (two f64) + s_hh (f64) + count (u64): constant regardless of chain length
MESSAGE_BYTES = 32


@dataclass(frozen=True)
class TopologySpec:
    """Fronthaul layout: M access points feeding one central unit."""

    kind: str  # star | daisy | tree
    ap_count: int
    per_ap_rate_bps: int
    link_capacity_bps: int
    combine_mode: str = "raw_forward"  # raw_forward | fixed_combine
    message_bytes: int = MESSAGE_BYTES
    combine_rate_hz: int = 1  # combine epochs per second under fixed_combine
    branching: int = 2  # tree fan-in
    capacity_overrides: dict = field(default_factory=dict)  # link name -> bps

    def __post_init__(self):
        if self.kind not in ("star", "daisy", "tree"):
            raise ValueError(f"unknown topology kind {self.kind!r}")
        if self.combine_mode not in ("raw_forward", "fixed_combine"):
            raise ValueError(f"unknown combine mode {self.combine_mode!r}")
        if self.ap_count < 1:
            raise ValueError("ap_count must be >= 1")
        if self.per_ap_rate_bps <= 0 or self.link_capacity_bps <= 0:
            raise ValueError("rates and capacities must be > 0")
        if self.combine_mode == "fixed_combine" and (
            self.message_bytes <= 0 or self.combine_rate_hz <= 0
        ):
            raise ValueError("fixed_combine needs positive message size and rate")
        if self.kind == "tree" and self.branching < 2:
            raise ValueError("tree branching factor must be >= 2")

    @property
    def fixed_message_rate_bps(self) -> int:
        return self.message_bytes * 8 * self.combine_rate_hz


def link_loads(topo: TopologySpec) -> dict:
    """Load on every link in integer bits/second.

    star: ap links carry the per-AP rate, the central ingress aggregates
    all of them. daisy raw_forward: hop k (counting from the far end)
    carries k times the per-AP rate; the last hop is the central ingress.
    fixed_combine: every link carries the fixed message rate. tree: each
    node forwards its subtree aggregate toward the root.
    """
    r = topo.per_ap_rate_bps
    fixed = topo.combine_mode == "fixed_combine"
    m_rate = topo.fixed_message_rate_bps
    loads: dict[str, int] = {}

    if topo.kind == "star":
        for i in range(topo.ap_count):
            loads[f"ap{i}"] = m_rate if fixed else r
        loads["central"] = m_rate * topo.ap_count if fixed else r * topo.ap_count
        return loads

    if topo.kind == "daisy":
        for k in range(1, topo.ap_count + 1):
            loads[f"hop{k}"] = m_rate if fixed else k * r
        return loads

    # tree: consecutive nodes grouped under parents of <= branching children
    level = [(f"leaf{i}", 1) for i in range(topo.ap_count)]
    depth = 0
    while len(level) > 1:
        parents = []
        for gi in range(0, len(level), topo.branching):
            group = level[gi : gi + topo.branching]
            ap_total = sum(n for _, n in group)
            name = f"n{depth}_{gi // topo.branching}"
            for child, n_aps in group:
                loads[f"{child}->{name}"] = m_rate if fixed else n_aps * r
            parents.append((name, ap_total))
        level = parents
        depth += 1
    root, n_aps = level[0]
    loads[f"{root}->central"] = m_rate if fixed else n_aps * r
    return loads


@dataclass(frozen=True)
class CapacityViolation:
    link: str
    load_bps: int
    capacity_bps: int

    @property
    def overload_ratio(self) -> float:
        return self.load_bps / self.capacity_bps


def check_capacity(loads: dict, topo: TopologySpec) -> list:
    """Every link whose load strictly exceeds its capacity."""
    out = []
    for link, load in loads.items():
        cap = topo.capacity_overrides.get(link, topo.link_capacity_bps)
        if load > cap:
            out.append(CapacityViolation(link, load, cap))
    return out


# ----------------------------------------------------------- combining


@dataclass(frozen=True)
class ApObservation:
    h: complex
    y: complex
    noise_var: float = 0.0

    def __post_init__(self):
        if self.noise_var < 0:
            raise ValueError("noise_var must be >= 0")


@dataclass(frozen=True)
class CombineState:
    s_hy: complex = 0j
    s_hh: float = 0.0
    count: int = 0

    def __post_init__(self):
        if self.s_hh < 0 or self.count < 0:
            raise ValueError("s_hh and count must be >= 0")


def combine_step(state: CombineState, obs: ApObservation) -> CombineState:
    """Fold one AP's observation into the sufficient statistics."""
    h = complex(obs.h)
    return CombineState(
        s_hy=state.s_hy + h.conjugate() * obs.y,
        s_hh=state.s_hh + abs(h) ** 2,
        count=state.count + 1,
    )


def finalize_estimate(state: CombineState) -> complex:
    """Maximum-ratio estimate from accumulated statistics."""
    if state.s_hh == 0.0:
        raise NoEnergy("no channel energy accumulated")
    return state.s_hy / state.s_hh


def centralized_mrc(observations: Sequence[ApObservation]) -> complex:
    """One-shot reference: sum conj(h)*y / sum |h|^2 over all APs."""
    num = sum(complex(o.h).conjugate() * o.y for o in observations)
    den = sum(abs(complex(o.h)) ** 2 for o in observations)
    if den == 0.0:
        raise NoEnergy("no channel energy in observations")
    return num / den


def run_chain(observations: Sequence[ApObservation]) -> tuple[complex, int]:
    """Fold combine_step along a daisy chain.

    Returns (estimate, per-hop message size in bytes); the message holds
    s_hy (re, im), s_hh and the count, so its size never depends on the
    chain length.
    """
    if not observations:
        raise ValueError("need at least one AP observation")
    state = CombineState()
    for obs in observations:
        state = combine_step(state, obs)
    return finalize_estimate(state), MESSAGE_BYTES
