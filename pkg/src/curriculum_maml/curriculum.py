"""Support-size curriculum: the step -> (K, alpha, L) schedule.

With multiplier ``M`` the run is cut into ``M`` stages. Stage ``i`` uses a
support set of ``(M - i) * shot`` examples per class and inner learning rate
``sqrt(M - i) * base_inner_lr``. The first ``M - 1`` stages share half of the
step budget equally (``floor(N / (2M - 2))`` each); the last stage, where the
support size equals ``shot``, takes every remaining step. ``M = 1`` is plain
MAML.

The ``static_support`` kind is the ablation that keeps ``K = M * shot`` for
the whole run.
"""

from __future__ import annotations

import bisect
import csv
import io
import math
from dataclasses import dataclass

QUERY_POLICIES = ("static", "adaptive")
SCHEDULE_KINDS = ("curriculum", "static_support")


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class CurriculumConfig:
    multiplier: int = 5
    shot: int = 1
    total_steps: int = 6000
    base_inner_lr: float = 0.5
    query_policy: str = "static"
    schedule_kind: str = "curriculum"
    # static_support only: use sqrt(M) * base_inner_lr instead of base_inner_lr
    static_scaled_lr: bool = False

    def validate(self) -> None:
        m, n = self.multiplier, self.total_steps
        if m < 1:
            raise ScheduleError(f"multiplier must be >= 1, got {m}")
        if self.shot < 1:
            raise ScheduleError(f"shot must be >= 1, got {self.shot}")
        if n < 2:
            raise ScheduleError(f"total_steps must be >= 2, got {n}")
        if m > 1 and n < 2 * (m - 1):
            raise ScheduleError(
                f"total_steps={n} too small for multiplier {m}: need >= {2 * (m - 1)}"
            )
        if not self.base_inner_lr > 0:
            raise ScheduleError(f"base_inner_lr must be positive, got {self.base_inner_lr}")
        if self.query_policy not in QUERY_POLICIES:
            raise ScheduleError(f"query_policy must be one of {QUERY_POLICIES}")
        if self.schedule_kind not in SCHEDULE_KINDS:
            raise ScheduleError(f"schedule_kind must be one of {SCHEDULE_KINDS}")


@dataclass(frozen=True)
class StageState:
    index: int
    support_size: int
    inner_lr: float
    query_size: int
    start: int
    end: int  # exclusive

    @property
    def length(self) -> int:
        return self.end - self.start


class Schedule:
    """Immutable stage table covering steps ``[0, total_steps)``."""

    def __init__(self, config: CurriculumConfig, stages):
        self.config = config
        self.stages: tuple[StageState, ...] = tuple(stages)
        self._starts = [s.start for s in self.stages]

    def __len__(self) -> int:
        return len(self.stages)

    def __iter__(self):
        return iter(self.stages)

    def __getitem__(self, i) -> StageState:
        return self.stages[i]

    @property
    def total_steps(self) -> int:
        return self.stages[-1].end

    @property
    def boundaries(self) -> list[int]:
        """Steps at which a new stage begins (excluding step 0)."""
        return self._starts[1:]

    @property
    def final(self) -> StageState:
        return self.stages[-1]

    def state_at(self, step: int) -> StageState:
        if not 0 <= step < self.total_steps:
            raise IndexError(f"step {step} outside [0, {self.total_steps})")
        return self.stages[bisect.bisect_right(self._starts, step) - 1]

    def max_demand(self) -> int:
        """Largest per-class example count (K + L) any training step needs."""
        return max(s.support_size + s.query_size for s in self.stages)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["step_start", "step_end", "stage", "K", "alpha", "L"])
        for s in self.stages:
            writer.writerow([s.start, s.end, s.index, s.support_size, repr(s.inner_lr), s.query_size])
        return buf.getvalue()


def stage_length(multiplier: int, total_steps: int) -> int:
    """Steps in each pre-final stage, ``floor((N / 2) / (M - 1))``."""
    return total_steps // (2 * (multiplier - 1))


def _query_size(cfg: CurriculumConfig, k: int) -> int:
    return k if cfg.query_policy == "adaptive" else cfg.shot


def build_schedule(cfg: CurriculumConfig) -> Schedule:
    cfg.validate()
    m, shot, n, lr0 = cfg.multiplier, cfg.shot, cfg.total_steps, cfg.base_inner_lr

    if cfg.schedule_kind == "static_support":
        k = m * shot
        lr = math.sqrt(m) * lr0 if cfg.static_scaled_lr else lr0
        return Schedule(cfg, [StageState(0, k, lr, _query_size(cfg, k), 0, n)])

    if m == 1:
        return Schedule(cfg, [StageState(0, shot, lr0, shot, 0, n)])

    span = stage_length(m, n)
    stages = []
    for i in range(m):
        start = i * span
        end = start + span if i < m - 1 else n
        k = (m - i) * shot
        stages.append(StageState(i, k, math.sqrt(m - i) * lr0, _query_size(cfg, k), start, end))
    return Schedule(cfg, stages)


def simulate_recurrence(cfg: CurriculumConfig) -> list[tuple[int, int, float]]:
    """Stage changes produced by the incremental K/alpha update loop.

    Starts from ``K = shot * M`` and ``alpha = alpha_0 * sqrt(M)``, then at every
    step ``i`` in ``1..N-1`` divisible by ``n = (N/2) / (M-1)`` applies
    ``K <- max(K - shot, shot)`` and ``alpha <- max(sqrt(alpha^2 - alpha_0^2), alpha_0)``.
    Returns ``(first_step, K, alpha)`` for each distinct state. Steps that are
    not multiples of ``n`` cannot change the state, so only multiples are visited.
    """
    cfg.validate()
    m, shot, n_total, lr0 = cfg.multiplier, cfg.shot, cfg.total_steps, cfg.base_inner_lr
    k = shot * m
    alpha = lr0 * math.sqrt(m)
    if cfg.schedule_kind == "static_support":
        return [(0, k, lr0 * math.sqrt(m) if cfg.static_scaled_lr else lr0)]
    states = [(0, k, alpha)]
    if m == 1:
        return states
    n = stage_length(m, n_total)
    for i in range(n, n_total, n):
        new_k = max(k - shot, shot)
        # clamp at 0: alpha^2 - alpha_0^2 may round to a tiny negative at the last stage
        new_alpha = max(math.sqrt(max(alpha * alpha - lr0 * lr0, 0.0)), lr0)
        if (new_k, new_alpha) != (k, alpha):
            states.append((i, new_k, new_alpha))
        k, alpha = new_k, new_alpha
    return states


def recurrence_equivalence_check(cfg: CurriculumConfig, tol: float = 1e-12) -> bool:
    """True iff the incremental update loop reproduces :func:`build_schedule`."""
    schedule = build_schedule(cfg)
    states = simulate_recurrence(cfg)
    # float rounding can leave a spurious near-duplicate alpha after K bottoms out
    merged = [states[0]]
    for step, k, alpha in states[1:]:
        if k == merged[-1][1] and abs(alpha - merged[-1][2]) <= tol:
            continue
        merged.append((step, k, alpha))
    if len(merged) != len(schedule):
        return False
    return all(
        step == st.start and k == st.support_size and abs(alpha - st.inner_lr) <= tol
        for (step, k, alpha), st in zip(merged, schedule)
    )
