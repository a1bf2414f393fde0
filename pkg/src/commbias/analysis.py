"""Protocol measurements: power probes, symbol correlation tables, channel
interventions and the interval statistics used to report them.

Digit-game policies are handled as tables: a speaker is ``S[d_s, m]`` and a
listener ``L[d_l, m, a]``, both row-stochastic. Rewards are ``R[d_s, d_l, a]``
(the sum-matching reward unless given), so reduced games plug in directly.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import ExperimentConfig
from .digits import N_ACTIONS, N_DIGITS, IdxDataset
from .nets import DigitAgentNet, TreasureAgentNet, one_hot
from .training import rollout_episodes
from .treasure import EPISODE_LENGTH, N_SYMBOLS, N_TUNNELS, TUNNEL_BOTTOM

Z95 = 1.959964
INTERVENTION_ROW = TUNNEL_BOTTOM - 3
INTERVENTION_START = 100
MIN_EMISSIONS = 50


# ================================================================ statistics

def wilson_interval(successes: int, n: int, confidence: float = 0.95) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion."""
    if n <= 0 or not 0 <= successes <= n or int(successes) != successes or int(n) != n:
        raise ValueError(f"need integers 0 <= successes <= n and n > 0, got ({successes}, {n})")
    if not 0 < confidence < 1:
        raise ValueError("confidence must lie in (0, 1)")
    z = Z95 if confidence == 0.95 else _normal_quantile(0.5 + confidence / 2)
    p = successes / n
    denom = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z / denom * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n))
    return max(0.0, centre - half), min(1.0, centre + half)


def _normal_quantile(q: float) -> float:
    # bisection on the normal CDF; only used for non-default confidence levels
    lo, hi = -10.0, 10.0
    for _ in range(200):
        mid = (lo + hi) / 2
        if 0.5 * (1 + math.erf(mid / math.sqrt(2))) < q:
            lo = mid
        else:
            hi = mid
    return (lo + hi) / 2


def mean_ci(values, z: float = Z95) -> tuple[float, float]:
    """Mean and normal-approximation half-width (0 for a single value)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("no values")
    if v.size == 1:
        return float(v[0]), 0.0
    return float(v.mean()), float(z * v.std(ddof=1) / math.sqrt(v.size))


@dataclass
class LearningCurve:
    window_end: np.ndarray      # [W] index (exclusive) of each window's last sample
    per_run: np.ndarray         # [R, W]
    mean: np.ndarray            # [W]
    half_width: np.ndarray      # [W]

    @property
    def lower(self) -> np.ndarray:
        return self.mean - self.half_width

    @property
    def upper(self) -> np.ndarray:
        return self.mean + self.half_width


def learning_curve(streams, windows: int = 100) -> LearningCurve:
    """Per-run window means and the cross-run mean with a 95% normal CI."""
    runs = [np.asarray(s, dtype=np.float64).ravel() for s in streams]
    if not runs or min(len(r) for r in runs) == 0:
        raise ValueError("learning_curve needs at least one non-empty run")
    length = min(len(r) for r in runs)
    if any(len(r) != length for r in runs):
        warnings.warn(f"runs of unequal length truncated to the shortest ({length} points)")
    runs = [r[:length] for r in runs]
    w = min(windows, length)
    edges = np.linspace(0, length, w + 1).round().astype(int)
    per_run = np.array([[r[a:b].mean() for a, b in zip(edges[:-1], edges[1:])] for r in runs])
    mean = per_run.mean(axis=0)
    if len(runs) > 1:
        half = Z95 * per_run.std(axis=0, ddof=1) / math.sqrt(len(runs))
    else:
        half = np.zeros(w)
    return LearningCurve(edges[1:], per_run, mean, half)


# ================================================================ digit-game tables

def sum_reward(n_digits: int = N_DIGITS, n_actions: int = N_ACTIONS) -> np.ndarray:
    """R[d_s, d_l, a] = 1 iff a = d_s + d_l."""
    r = np.zeros((n_digits, n_digits, n_actions))
    for ds in range(n_digits):
        for dl in range(n_digits):
            if ds + dl < n_actions:
                r[ds, dl, ds + dl] = 1.0
    return r


def _defaults(reward, digit_probs, n_digits):
    reward = sum_reward(n_digits, 2 * n_digits - 1) if reward is None else np.asarray(reward, dtype=np.float64)
    p = np.full(n_digits, 1.0 / n_digits) if digit_probs is None else np.asarray(digit_probs, np.float64)
    if p.shape != (n_digits,) or (p < 0).any() or not np.isclose(p.sum(), 1.0):
        raise ValueError("digit_probs must be a distribution over the digits")
    return reward, p


def expected_reward(speaker: np.ndarray, listener: np.ndarray, reward=None,
                    digit_probs=None) -> float:
    """Exact expected reward with both digits drawn independently from ``digit_probs``."""
    s = np.asarray(speaker, np.float64)
    lt = np.asarray(listener, np.float64)
    reward, p = _defaults(reward, digit_probs, s.shape[0])
    # sum over d_s, d_l, m, a of p(d_s) p(d_l) S[d_s,m] L[d_l,m,a] R[d_s,d_l,a]
    return float(np.einsum("s,l,sm,lma,sla->", p, p, s, lt, reward))


def fit_optimal_listener(speaker: np.ndarray, digit_probs=None, with_messages: bool = True,
                         reward=None) -> tuple[np.ndarray, float]:
    """Best deterministic listener against a tabular speaker.

    Each (d_l, m) cell takes the action with the highest expected reward given
    the posterior over speaker digits; cells the speaker never reaches, and every
    cell when ``with_messages`` is false, use the best message-free action.
    Ties go to the lowest action.
    """
    s = np.asarray(speaker, np.float64)
    n_digits, n_messages = s.shape
    reward, p = _defaults(reward, digit_probs, n_digits)
    n_actions = reward.shape[2]
    # q[d_l, m, a] = sum_ds p(ds) S[ds, m] R[ds, dl, a]
    q = np.einsum("s,sm,sla->lma", p, s, reward)
    blind = np.einsum("s,sla->la", p, reward)                 # message-free value
    table = np.zeros((n_digits, n_messages, n_actions))
    fallback = blind.argmax(axis=1)
    for dl in range(n_digits):
        for m in range(n_messages):
            seen = with_messages and s[:, m] @ p > 0
            a = int(q[dl, m].argmax()) if seen else int(fallback[dl])
            table[dl, m, a] = 1.0
    return table, expected_reward(s, table, reward, p)


def fit_optimal_speaker(listener: np.ndarray, digit_probs=None, uniform: bool = False,
                        reward=None) -> tuple[np.ndarray, float]:
    """Best deterministic speaker against a tabular listener, or the uniform one."""
    lt = np.asarray(listener, np.float64)
    n_digits, n_messages, _ = lt.shape
    reward, p = _defaults(reward, digit_probs, n_digits)
    if uniform:
        table = np.full((n_digits, n_messages), 1.0 / n_messages)
    else:
        # v[d_s, m] = sum_dl p(dl) sum_a L[dl, m, a] R[ds, dl, a]
        v = np.einsum("l,lma,sla->sm", p, lt, reward)
        table = np.zeros((n_digits, n_messages))
        table[np.arange(n_digits), v.argmax(axis=1)] = 1.0
    return table, expected_reward(table, lt, reward, p)


def _normalise(p: np.ndarray) -> np.ndarray:
    # float32 softmax rows sum to 1 only within ~1e-7; exact identities need float64 rows
    p = np.asarray(p, dtype=np.float64)
    return p / p.sum(axis=-1, keepdims=True)


def _by_label(values: np.ndarray, labels: np.ndarray, n_digits: int) -> np.ndarray:
    out = np.zeros((n_digits,) + values.shape[1:])
    for d in range(n_digits):
        rows = labels == d
        if not rows.any():
            raise ValueError(f"no samples of digit {d}; raise the sample count")
        out[d] = values[rows].mean(axis=0)
    return out


def speaker_table(speaker: DigitAgentNet, dataset: IdxDataset | None = None,
                  samples: int = 10_000, rng: np.random.Generator | None = None) -> np.ndarray:
    """P(m | d_s): exact in symbolic mode, averaged over sampled images otherwise."""
    if speaker.symbolic:
        x = speaker.encode_inputs(np.arange(speaker.n_digits))
        return _normalise(ad.softmax(speaker.logits(x)).values)
    idx = (rng or np.random.default_rng(0)).integers(0, len(dataset), samples)
    probs = np.concatenate([ad.softmax(speaker.logits(speaker.encode_inputs(dataset.image(c)))).values
                            for c in np.array_split(idx, max(1, samples // 500))])
    return _normalise(_by_label(probs.astype(np.float64), dataset.labels[idx], speaker.n_digits))


def listener_table(listener: DigitAgentNet, dataset: IdxDataset | None = None,
                   samples: int = 10_000, rng: np.random.Generator | None = None) -> np.ndarray:
    """P(a | d_l, m) for every symbol m, exact in symbolic mode."""
    k, nd = listener.n_messages, listener.n_digits
    if listener.symbolic:
        dl, m = np.meshgrid(np.arange(nd), np.arange(k), indexing="ij")
        x = listener.encode_inputs(dl.ravel())
        probs = ad.softmax(listener.logits(x, one_hot(m.ravel(), k))).values
        return _normalise(probs.reshape(nd, k, -1))
    idx = (rng or np.random.default_rng(0)).integers(0, len(dataset), samples)
    out = []
    for m in range(k):
        chunks = []
        for c in np.array_split(idx, max(1, samples // 500)):
            msg = one_hot(np.full(len(c), m), k)
            chunks.append(ad.softmax(listener.logits(listener.encode_inputs(dataset.image(c)), msg)).values)
        out.append(_by_label(np.concatenate(chunks).astype(np.float64), dataset.labels[idx], nd))
    return _normalise(np.stack(out, axis=1))


@dataclass
class ProbeReport:
    r_listener_comm: float      # R(pi_lc, pi_s)
    r_listener_nocomm: float    # R(pi_lnc, pi_s)
    r_speaker_comm: float       # R(pi_l, pi_sc)
    r_speaker_uniform: float    # R(pi_l, pi_su)

    @property
    def listener_power(self) -> float:
        return self.r_listener_comm - self.r_listener_nocomm

    @property
    def speaker_power(self) -> float:
        return self.r_speaker_comm - self.r_speaker_uniform

    def to_dict(self) -> dict:
        return {**asdict(self), "listener_power": self.listener_power,
                "speaker_power": self.speaker_power}


def probe_tables(speaker: np.ndarray, listener: np.ndarray, digit_probs=None,
                 reward=None) -> ProbeReport:
    return ProbeReport(
        fit_optimal_listener(speaker, digit_probs, True, reward)[1],
        fit_optimal_listener(speaker, digit_probs, False, reward)[1],
        fit_optimal_speaker(listener, digit_probs, False, reward)[1],
        fit_optimal_speaker(listener, digit_probs, True, reward)[1])


def power_probe(speaker: DigitAgentNet, listener: DigitAgentNet, dataset: IdxDataset | None = None,
                samples: int = 10_000, seed: int = 0) -> ProbeReport:
    """Listener and speaker power of a trained pair (exact for symbolic nets)."""
    rng = np.random.default_rng(seed)
    return probe_tables(speaker_table(speaker, dataset, samples, rng),
                        listener_table(listener, dataset, samples, rng))


# ================================================================ treasure hunt tables

@dataclass
class CorrelationTable:
    """P(event | symbol) per symbol, with Wilson half-widths; absent rows are NaN."""
    event: str
    labels: list
    counts: np.ndarray          # [symbols, events]

    @property
    def usage(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def absent(self) -> np.ndarray:
        return self.usage == 0

    @property
    def probs(self) -> np.ndarray:
        n = self.usage[:, None].astype(np.float64)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(n > 0, self.counts / np.maximum(n, 1), np.nan)

    @property
    def half_widths(self) -> np.ndarray:
        out = np.full(self.counts.shape, np.nan)
        for s, n in enumerate(self.usage):
            if n:
                for e, k in enumerate(self.counts[s]):
                    lo, hi = wilson_interval(int(k), int(n))
                    out[s, e] = (hi - lo) / 2
        return out

    def rows(self) -> list[dict]:
        """Long format: one row per (symbol, event); column layout is stable."""
        probs, hw = self.probs, self.half_widths
        out = []
        for s in range(len(self.counts)):
            for e, label in enumerate(self.labels):
                out.append({"symbol": s, "usage": int(self.usage[s]), "event": self.event,
                            "value": label, "count": int(self.counts[s, e]),
                            "probability": "" if self.absent[s] else f"{probs[s, e]:.6f}",
                            "half_width": "" if self.absent[s] else f"{hw[s, e]:.6f}",
                            "absent": int(self.absent[s])})
        return out

    def to_csv(self, path) -> None:
        rows = self.rows()
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)

    def format(self) -> str:
        probs, hw = self.probs, self.half_widths
        head = f"{'S':>2} {'n':>6} " + " ".join(f"{self.event}={v!s:>12}" for v in self.labels)
        lines = [head]
        for s in range(len(self.counts)):
            if self.absent[s]:
                cells = ["absent".rjust(len(self.event) + 13)] * len(self.labels)
            else:
                cells = [f"{probs[s, e]:.2f} ± {hw[s, e]:.2f}".rjust(len(self.event) + 13)
                         for e in range(len(self.labels))]
            lines.append(f"{s:>2} {int(self.usage[s]):>6} " + " ".join(cells))
        return "\n".join(lines)


def correlation_tables(trace: dict, n_actions: int = 5) -> tuple[CorrelationTable, CorrelationTable]:
    """Tunnel and collector-action tables from a recorded rollout.

    The tunnel table pairs each emitted finder symbol with the treasure tunnel
    at that step. The action table pairs each symbol the collector received
    with the action it took on the same step.
    """
    sym, tun = trace["finder_symbol"].ravel(), trace["treasure_tunnel"].ravel()
    ok = (sym >= 0) & (sym < N_SYMBOLS)
    tunnel = np.zeros((N_SYMBOLS, N_TUNNELS), dtype=np.int64)
    np.add.at(tunnel, (sym[ok], tun[ok]), 1)
    rec, act = trace["collector_received"].ravel(), trace["collector_action"].ravel()
    ok = (rec >= 0) & (rec < N_SYMBOLS)
    action = np.zeros((N_SYMBOLS, n_actions), dtype=np.int64)
    np.add.at(action, (rec[ok], act[ok]), 1)
    return (CorrelationTable("T", list(range(1, N_TUNNELS + 1)), tunnel),
            CorrelationTable("A", list(range(n_actions)), action))


def protocol_tables(finder, collector, cfg: ExperimentConfig | None = None, episodes: int = 100,
                    seed: int = 0) -> tuple[CorrelationTable, CorrelationTable]:
    """Roll out ``episodes`` episodes and tabulate symbol correlations.

    ``finder`` and ``collector`` are TreasureAgentNets or scripted agents.
    """
    nets, scripted, coll = _split_agents(finder, collector)
    cfg = cfg or ExperimentConfig(env="treasure", batch_size=16)
    out = rollout_episodes(nets, cfg, seed, episodes, scripted=scripted, collector=coll,
                           record_positions=True)
    return correlation_tables(out)


def _split_agents(finder, collector):
    nets = [finder if isinstance(finder, TreasureAgentNet) else None,
            collector if isinstance(collector, TreasureAgentNet) else None]
    return nets, (None if nets[0] is not None else finder), (None if nets[1] is not None else collector)


def strongest_symbol(table: CorrelationTable, tunnel: int, min_count: int = MIN_EMISSIONS) -> int:
    """Symbol s maximising P(T = tunnel | S = s) among symbols emitted at least ``min_count`` times."""
    usable = np.flatnonzero(table.usage >= min_count)
    if usable.size == 0:
        raise ValueError(f"no symbol emitted at least {min_count} times")
    return int(usable[np.argmax(table.probs[usable, tunnel])])


@dataclass
class InterventionReport:
    forced_symbol: int
    target_tunnel: int
    baseline_mean: float
    baseline_ci: float
    forced_mean: float
    forced_ci: float
    baseline_censored: int
    forced_censored: int
    episodes: int

    @property
    def separated(self) -> bool:
        """Forced mean below baseline with non-overlapping 95% intervals."""
        return self.forced_mean + self.forced_ci < self.baseline_mean - self.baseline_ci

    def to_dict(self) -> dict:
        return {**asdict(self), "separated": self.separated}


def visit_times(trace: dict, target_tunnel: int, cols: np.ndarray, start: int = INTERVENTION_START,
                horizon: int = EPISODE_LENGTH) -> tuple[np.ndarray, np.ndarray]:
    """First step >= ``start`` at which the collector is on the target cell or
    deeper in the same tunnel (a collector parked at the tunnel bottom has
    already reached the square).

    Episodes that never get there are censored at ``horizon``.
    """
    pos = trace["collector_pos"]                                 # [T, n, 2]
    target_col = cols[np.arange(cols.shape[0]), target_tunnel]
    steps = np.arange(pos.shape[0])[:, None]
    hit = (pos[..., 0] >= INTERVENTION_ROW) & (pos[..., 1] == target_col[None]) & (steps >= start)
    reached = hit.any(axis=0)
    first = np.where(reached, hit.argmax(axis=0), horizon).astype(np.float64)
    return first, ~reached


def intervention_experiment(finder, collector, forced_symbol: int, target_tunnel: int,
                            episodes: int = 100, seed: int = 0,
                            cfg: ExperimentConfig | None = None,
                            start: int = INTERVENTION_START) -> InterventionReport:
    """Visit time to row 11 of ``target_tunnel`` with and without forcing the channel.

    Both conditions replay the same maps and seeds; the forced condition sets
    the collector's incoming symbol to ``forced_symbol`` from frame ``start`` on.
    """
    if not 0 <= target_tunnel < N_TUNNELS:
        raise ValueError(f"target_tunnel must lie in 0..{N_TUNNELS - 1}")
    if not 0 <= forced_symbol < N_SYMBOLS:
        raise ValueError(f"forced_symbol must lie in 0..{N_SYMBOLS - 1}")
    nets, scripted, coll = _split_agents(finder, collector)
    cfg = cfg or ExperimentConfig(env="treasure", batch_size=16)
    result = {}
    for name, force in (("baseline", None), ("forced", forced_symbol)):
        out = rollout_episodes(nets, cfg, seed, episodes, scripted=scripted, collector=coll,
                               force_symbol=force, force_after=start, record_positions=True)
        result[name] = visit_times(out, target_tunnel, out["tunnel_cols"], start)
    (b, bc), (f, fc) = result["baseline"], result["forced"]
    bm, bw = mean_ci(b)
    fm, fw = mean_ci(f)
    return InterventionReport(forced_symbol, target_tunnel, bm, bw, fm, fw,
                              int(bc.sum()), int(fc.sum()), episodes)


def write_json_report(path, report) -> None:
    data = report.to_dict() if hasattr(report, "to_dict") else report
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
