"""Wavefront forward propagation over sampled grids and seeded region extraction.

Grids are processed in batches that share one shape. Node ``(r, c)`` of grid
``b`` lives at flat index ``b * rows * cols + r * cols + c``; every state array
carries one extra all-zero row at the end, which absent neighbours point to, so
routing is a plain gather.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .cell import CellParams, NodeInputs, cell_forward
from .errors import InvalidArgument, SchedulingViolation
from .grid import OPPOSITE, Direction, SectionPlan

# neighbour offsets in flat index space, per slot b, r, l, t
def _slot_offsets(cols: int):
    return (cols, 1, -1, -cols)


@dataclass
class Round:
    idx: np.ndarray          # (n,) flat node indices evaluated in this round
    nb: np.ndarray           # (n, 4) previous-section neighbour per slot, pad index if absent
    tape: dict | None = None


@dataclass(eq=False)
class GridState:
    plans: list[SectionPlan]
    c: np.ndarray       # (N + 1, d)
    h_out: np.ndarray   # (N + 1, 4, d)
    y: np.ndarray       # (N + 1, 5)
    logits: np.ndarray  # (N + 1, 5)
    evaluated: np.ndarray
    rounds: list[Round] = field(default_factory=list)

    @property
    def shape(self) -> tuple[int, int]:
        return self.plans[0].shape

    @property
    def n_grids(self) -> int:
        return len(self.plans)

    @property
    def n_nodes(self) -> int:
        return self.c.shape[0] - 1

    @property
    def pad(self) -> int:
        return self.n_nodes

    def flat_index(self, p, b: int = 0) -> int:
        rows, cols = self.shape
        return b * rows * cols + p[0] * cols + p[1]

    def y_grid(self, b: int = 0) -> np.ndarray:
        rows, cols = self.shape
        k = rows * cols
        return self.y[b * k:(b + 1) * k].reshape(rows, cols, 5)

    def c_grid(self, b: int = 0) -> np.ndarray:
        rows, cols = self.shape
        k = rows * cols
        return self.c[b * k:(b + 1) * k].reshape(rows, cols, -1)

    @classmethod
    def empty(cls, plans, d: int, dtype=np.float64) -> "GridState":
        rows, cols = plans[0].shape
        if any(p.shape != (rows, cols) for p in plans):
            raise InvalidArgument("all grids in a batch must share one shape")
        n = len(plans) * rows * cols + 1
        return cls(list(plans), np.zeros((n, d), dtype), np.zeros((n, 4, d), dtype),
                   np.zeros((n, 5), dtype), np.zeros((n, 5), dtype), np.zeros(n, dtype=bool))

    def store(self, i: int, c, h_out, y, logits) -> None:
        self.c[i] = c
        self.h_out[i] = h_out
        self.y[i] = y
        self.logits[i] = logits
        self.evaluated[i] = True


def schedule(plans: list[SectionPlan]) -> list[Round]:
    """Per-round node and neighbour index arrays for a batch of plans."""
    rows, cols = plans[0].shape
    k = rows * cols
    pad = len(plans) * k
    offs = np.array(_slot_offsets(cols))
    n_rounds = max(p.n_rounds for p in plans)
    out = []
    for r in range(n_rounds):
        idx_parts, nb_parts = [], []
        for b, plan in enumerate(plans):
            if r >= plan.n_rounds:
                continue
            local = plan.sections[r]
            prev = plan.prev.reshape(k, 4)[local]
            g = local + b * k
            idx_parts.append(g)
            nb_parts.append(np.where(prev, g[:, None] + offs, pad))
        out.append(Round(np.concatenate(idx_parts), np.concatenate(nb_parts)))
    return out


def gather_inputs(state: GridState, params: CellParams, x_flat: np.ndarray, rnd: Round, first: bool):
    """Routing for one round, vectorised over its nodes.

    ``c_in[j]`` and ``y_in[j]`` copy the slot-``j`` neighbour's state and
    indicator; ``h_in[j]`` is the message that neighbour addressed back to
    us, i.e. its ``h_out[opposite(j)]``. ``h_in[c]`` carries the learned seed
    vector in the seed round only.
    """
    nb = rnd.nb
    n = nb.shape[0]
    d = params.d
    c_in = state.c[nb]                       # (n, 4, d)
    y_in = state.y[nb]                       # (n, 4, 5)
    h_in = np.zeros((n, 5, d), dtype=params.dtype)
    for j in range(4):
        h_in[:, 1 + j] = state.h_out[nb[:, j], OPPOSITE[j]]
    if first:
        h_in[:, 0] = params.h_seed
    return x_flat[rnd.idx], c_in, h_in, y_in


def forward_batch(params: CellParams, values: np.ndarray, plans: list[SectionPlan],
                  keep_tape: bool = True, check: bool = False) -> GridState:
    """Evaluate a batch of grids section by section.

    ``values`` is (B, rows, cols, d_x). With ``check`` every round verifies that
    its dependencies were evaluated in an earlier round.
    """
    values = np.asarray(values)
    if values.ndim == 3:
        values = values[None]
    if values.shape[0] != len(plans) or values.shape[1:3] != plans[0].shape:
        raise InvalidArgument(f"sampled values {values.shape} do not match the section plans")
    state = GridState.empty(plans, params.d, params.dtype)
    x_flat = values.reshape(-1, values.shape[-1]).astype(params.dtype, copy=False)
    W, b = params.fused()
    fused = (np.ascontiguousarray(W.T), b)
    pad = state.pad
    for r, rnd in enumerate(schedule(plans)):
        if check:
            deps = rnd.nb[rnd.nb != pad]
            if not state.evaluated[deps].all():
                raise SchedulingViolation(f"round {r} reads an unevaluated node")
        x, c_in, h_in, y_in = gather_inputs(state, params, x_flat, rnd, first=(r == 0))
        (c, h_out, y, logits), tape = cell_forward(params, x, c_in, h_in, y_in, fused=fused)
        i = rnd.idx
        state.c[i] = c
        state.h_out[i] = h_out
        state.y[i] = y
        state.logits[i] = logits
        state.evaluated[i] = True
        if keep_tape:
            rnd.tape = tape
        state.rounds.append(rnd)
    return state


def forward(params: CellParams, sampled, plan: SectionPlan, keep_tape: bool = True) -> GridState:
    values = getattr(sampled, "values", sampled)
    return forward_batch(params, np.asarray(values)[None], [plan], keep_tape=keep_tape)


def route_inputs(p, state: GridState, plan: SectionPlan, sampled, params: CellParams, b: int = 0) -> NodeInputs:
    """Inputs of a single node read from a (possibly partial) state."""
    values = getattr(sampled, "values", sampled)
    rows, cols = plan.shape
    d = params.d
    dt = params.dtype
    c_in = np.zeros((4, d), dt)
    h_in = np.zeros((5, d), dt)
    y_in = np.zeros((4, 5), dt)
    for j in plan.prev_dirs(p):
        dr, dc = ((1, 0), (0, 1), (0, -1), (-1, 0))[j]
        q = state.flat_index((p[0] + dr, p[1] + dc), b)
        if not state.evaluated[q]:
            raise SchedulingViolation(f"node {p} needs {(p[0] + dr, p[1] + dc)}, which is not evaluated yet")
        c_in[j] = state.c[q]
        y_in[j] = state.y[q]
        h_in[1 + j] = state.h_out[q, Direction(j).opposite()]
    if tuple(p) == tuple(plan.seed):
        h_in[0] = params.h_seed
    return NodeInputs(np.asarray(values[p[0], p[1]], dt), c_in, h_in, y_in)


@dataclass(eq=False)
class MergeResult:
    merged: np.ndarray  # (rows, cols) bool
    count: int


def extract_region(state: GridState, plan: SectionPlan | None = None, b: int = 0) -> MergeResult:
    """Merge rule: a node joins when its argmax direction points at a merged
    previous-section neighbour. Sections are visited inside-out."""
    plan = plan or state.plans[b]
    return merge_from_y(state.y_grid(b), plan)


def merge_from_y(y: np.ndarray, plan: SectionPlan) -> MergeResult:
    rows, cols = plan.shape
    k = rows * cols
    arg = np.argmax(y.reshape(k, 5), axis=1)
    prev = plan.prev.reshape(k, 4)
    offs = np.array(_slot_offsets(cols))
    merged = np.zeros(k + 1, dtype=bool)
    merged[plan.sections[0]] = True
    for sec in plan.sections[1:]:
        a = arg[sec]
        ok = a < 4
        ac = np.minimum(a, 3)
        ok &= prev[sec, ac]
        target = np.where(ok, sec + offs[ac], k)
        merged[sec] = ok & merged[target]
    m = merged[:k].reshape(rows, cols)
    return MergeResult(m, int(m.sum()))


def infer_batch(params: CellParams, values: np.ndarray, plans: list[SectionPlan],
                threads: int = 1, chunk: int | None = None) -> tuple[np.ndarray, list[MergeResult]]:
    """Forward + extraction for many grids; returns (B, rows, cols, 5) indicators and merges.

    Grids are independent, so chunks run on a thread pool. Results do not
    depend on ``threads`` or ``chunk``.
    """
    values = np.asarray(values)
    B = len(plans)
    if B == 0:
        return np.zeros((0,) + plans_shape(plans) + (5,)), []
    threads = max(1, int(threads))
    if chunk is None:
        chunk = max(1, -(-B // threads))

    def run(lo):
        hi = min(B, lo + chunk)
        st = forward_batch(params, values[lo:hi], plans[lo:hi], keep_tape=False)
        ys = np.stack([st.y_grid(i) for i in range(hi - lo)])
        return ys, [merge_from_y(ys[i], plans[lo + i]) for i in range(hi - lo)]

    starts = list(range(0, B, chunk))
    if threads == 1 or len(starts) == 1:
        parts = [run(lo) for lo in starts]
    else:
        with ThreadPoolExecutor(threads) as ex:
            parts = list(ex.map(run, starts))
    ys = np.concatenate([p[0] for p in parts])
    merges = [m for p in parts for m in p[1]]
    return ys, merges


def plans_shape(plans):
    return plans[0].shape if plans else (0, 0)
