"""Dynamic direction labels, the per-node cross-entropy loss, and its exact adjoint."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cell import CellParams, cell_backward, init_params
from .engine import GridState, forward_batch
from .errors import InvalidArgument
from .grid import OPPOSITE, Direction, GridSpec, SectionPlan, compute_sections

PROB_FLOOR = 1e-12


@dataclass(eq=False)
class LabelPlan:
    label: np.ndarray       # (rows, cols) Direction indices
    candidates: np.ndarray  # (rows, cols, 4) bool


@dataclass(eq=False)
class LossReport:
    total: float
    per_node: np.ndarray
    N: int


def _shifted(mask: np.ndarray, j: int) -> np.ndarray:
    """``out[r, c]`` = mask at the slot-``j`` neighbour of (r, c), False off-grid."""
    out = np.zeros_like(mask)
    if j == Direction.TO_BOTTOM:
        out[:-1] = mask[1:]
    elif j == Direction.TO_RIGHT:
        out[:, :-1] = mask[:, 1:]
    elif j == Direction.TO_LEFT:
        out[:, 1:] = mask[:, :-1]
    else:
        out[1:] = mask[:-1]
    return out


def label_nodes(mask: np.ndarray, plan: SectionPlan, state: GridState | np.ndarray, b: int = 0) -> LabelPlan:
    """Pick each positive node's target direction from its current prediction.

    Candidates are the previous-section neighbours that are also positive; the
    label is the candidate the model currently scores highest. Negative nodes,
    the seed, and positive nodes with no candidate get NONE.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != plan.shape:
        raise InvalidArgument(f"mask shape {mask.shape} does not match grid {plan.shape}")
    if not mask[plan.seed]:
        raise InvalidArgument("seed node lies outside the ground-truth mask")
    y = state.y_grid(b) if isinstance(state, GridState) else np.asarray(state)

    cand = np.stack([_shifted(mask, j) for j in range(4)], axis=-1) & plan.prev
    cand &= mask[..., None]
    scores = np.where(cand, y[..., :4], -np.inf)
    label = np.where(cand.any(axis=-1), np.argmax(scores, axis=-1), int(Direction.NONE))
    return LabelPlan(label.astype(np.int64), cand)


def cse_loss(state: GridState | np.ndarray, labels: LabelPlan, b: int = 0) -> LossReport:
    y = state.y_grid(b) if isinstance(state, GridState) else np.asarray(state)
    if y.shape[:2] != labels.label.shape:
        raise InvalidArgument("labels and state disagree on grid shape")
    p = np.take_along_axis(y, labels.label[..., None], axis=-1)[..., 0]
    per_node = -np.log(np.maximum(p, PROB_FLOOR))
    N = per_node.size
    return LossReport(float(per_node.sum() / N), per_node, N)


def batch_loss(state: GridState, labels: list[LabelPlan]) -> float:
    return float(np.mean([cse_loss(state, lab, b).total for b, lab in enumerate(labels)]))


def logit_grads(state: GridState, labels: list[LabelPlan]) -> np.ndarray:
    """d(batch loss)/d(logits) with labels held fixed; batch loss = mean over grids."""
    rows, cols = state.shape
    k = rows * cols
    B = state.n_grids
    y = state.y[:-1]
    lab = np.concatenate([l.label.ravel() for l in labels])
    g = y.copy()
    ar = np.arange(y.shape[0])
    g[ar, lab] -= 1.0
    g[y[ar, lab] < PROB_FLOOR] = 0.0  # floor is flat below 1e-12
    g *= 1.0 / (k * B)
    out = np.zeros_like(state.y)
    out[:-1] = g
    return out


def backward(params: CellParams, state: GridState, labels, plan: SectionPlan | None = None) -> CellParams:
    """Gradients of the (batch-mean) loss w.r.t. every parameter.

    Rounds are replayed in reverse; each round's input adjoints are sent back
    to its previous-section neighbours, the exact inverse of the forward
    routing, before those neighbours are themselves differentiated.
    """
    if isinstance(labels, LabelPlan):
        labels = [labels]
    if len(labels) != state.n_grids:
        raise InvalidArgument(f"{len(labels)} label plans for {state.n_grids} grids")
    if not state.rounds or any(r.tape is None for r in state.rounds):
        raise InvalidArgument("state has no tape; run forward with keep_tape=True")

    dt = params.dtype
    dlog = logit_grads(state, labels).astype(dt, copy=False)
    dC = np.zeros_like(state.c)
    dH = np.zeros_like(state.h_out)
    dY = np.zeros_like(state.y)
    grads = params.zeros_like()
    pad = state.pad

    for r in range(len(state.rounds) - 1, -1, -1):
        rnd = state.rounds[r]
        i = rnd.idx
        (_, dc_in, dh_in, dy_in), grads = cell_backward(
            params, rnd.tape, dC[i], dH[i], dY[i], dlog[i], grads)
        nb = rnd.nb
        # within one slot the targets are distinct, except the shared pad row
        for j in range(4):
            t = nb[:, j]
            dC[t] += dc_in[:, j]
            dY[t] += dy_in[:, j]
            dH[t, OPPOSITE[j]] += dh_in[:, 1 + j]
        dC[pad] = 0.0
        dY[pad] = 0.0
        dH[pad] = 0.0
        if r == 0:
            grads.h_seed += dh_in[:, 0].sum(axis=0)
    return grads


def loss_and_grads(params: CellParams, values, plans, masks):
    """One frozen-label step: forward, label, loss, backward."""
    state = forward_batch(params, values, plans)
    labels = [label_nodes(m, plans[b], state, b) for b, m in enumerate(masks)]
    loss = batch_loss(state, labels)
    return loss, backward(params, state, labels), state, labels


@dataclass
class GradCheckReport:
    max_rel_error: float
    mean_rel_error: float
    n_coords: int
    worst: str

    def __str__(self):
        return (f"checked {self.n_coords} coordinates: max rel. error {self.max_rel_error:.3e}, "
                f"mean {self.mean_rel_error:.3e} (worst at {self.worst})")


def rel_error(a, n, floor: float = 1e-8):
    a = np.asarray(a)
    n = np.asarray(n)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def random_check_problem(d: int = 8, d_x: int = 6, S: int = 7, rng=42, zero: bool = False):
    """Random float64 parameters, features and in-seed mask for gradient checks.

    Biases, gains and the output offset are randomised too, so that no
    parameter sits at a special point.
    """
    rng = np.random.default_rng(rng)
    params = init_params(d, d_x, rng, dtype=np.float64)
    for name, v in params.tensors().items():
        if zero:
            v[...] = 0.0
        elif not name.startswith("W_"):
            v[...] = rng.normal(0.0, 0.5, size=v.shape)
    if not zero:
        params.ln_gain += 1.0
    grid = GridSpec(S, S, (0.0, 0.0), 1.0, 1.0, (S // 2, S // 2))
    plan = compute_sections(grid)
    values = rng.normal(size=(1, S, S, d_x))
    mask = rng.random((S, S)) < 0.7
    mask[plan.seed] = True
    return params, values, [plan], [mask]


def grad_check(d: int = 8, d_x: int = 6, S: int = 7, eps: float = 1e-4, rng=42,
               n_coords: int | None = 1000, problem=None) -> GradCheckReport:
    """Compare analytic gradients with central differences, labels frozen.

    Coordinates are sampled at random (``n_coords``, at least 500 unless the
    model is smaller); every tensor contributes at least some coordinates.
    """
    if problem is None:
        problem = random_check_problem(d, d_x, S, rng)
    params, values, plans, masks = problem
    if params.dtype != np.float64:
        raise InvalidArgument("gradient checks need float64 parameters")
    state = forward_batch(params, values, plans)
    labels = [label_nodes(m, plans[b], state, b) for b, m in enumerate(masks)]
    analytic = backward(params, state, labels)

    def loss_at(p):
        st = forward_batch(p, values, plans, keep_tape=False)
        return batch_loss(st, labels)

    pick = np.random.default_rng(rng if isinstance(rng, int) else 0)
    tensors = params.tensors()
    total = sum(v.size for v in tensors.values())
    budget = total if n_coords is None else min(total, max(int(n_coords), 500))
    coords = []
    for name, v in tensors.items():
        share = max(min(v.size, 8), int(round(budget * v.size / total)))
        share = min(share, v.size)
        coords += [(name, int(i)) for i in pick.choice(v.size, size=share, replace=False)]

    errs = []
    worst = ("", -1.0)
    for name, i in coords:
        v = tensors[name].reshape(-1)
        old = v[i]
        v[i] = old + eps
        lp = loss_at(params)
        v[i] = old - eps
        lm = loss_at(params)
        v[i] = old
        num = (lp - lm) / (2 * eps)
        a = getattr(analytic, name).reshape(-1)[i]
        e = float(rel_error(a, num))
        errs.append(e)
        if e > worst[1]:
            worst = (f"{name}[{i}]", e)
    errs = np.array(errs)
    return GradCheckReport(float(errs.max()), float(errs.mean()), len(coords), worst[0])
