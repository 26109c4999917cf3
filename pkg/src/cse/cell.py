"""The CSE cell: gated, layer-normalised local state plus directional messages.

Every kernel here works on a stack of ``n`` nodes at once (leading axis). The
single-node API (:func:`node_forward`, :func:`node_backward`) is the same code
with ``n == 1``. Matrix products go through :func:`rowdot`, whose result for a
row never depends on which other rows share the call, so a wavefront batch and
a node-at-a-time sweep produce bit-identical numbers.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import InvalidArgument, NumericFailure

N_DIRS = 4
N_CLASSES = 5
LN_EPS = 1e-5

# order of tensors in checkpoints and flat parameter vectors
PARAM_NAMES = (
    "W_c", "b_c", "W_gci", "b_gci", "W_gct", "b_gct", "W_go", "b_go",
    "b_o", "W_y", "b_y", "h_seed", "ln_gain", "ln_bias",
)


def input_width(d: int, d_x: int) -> int:
    return d_x + 5 * d + 20


@dataclass(eq=False)
class CellParams:
    W_c: np.ndarray    # (d, m)
    b_c: np.ndarray
    W_gci: np.ndarray  # (4d, m)
    b_gci: np.ndarray
    W_gct: np.ndarray  # (d, m)
    b_gct: np.ndarray
    W_go: np.ndarray   # (4d, m)
    b_go: np.ndarray
    b_o: np.ndarray    # (4d,)
    W_y: np.ndarray    # (5, d)
    b_y: np.ndarray
    h_seed: np.ndarray
    ln_gain: np.ndarray
    ln_bias: np.ndarray
    ln_eps: float = LN_EPS
    layer_norm: bool = True

    @property
    def d(self) -> int:
        return self.b_c.shape[0]

    @property
    def d_x(self) -> int:
        return self.W_c.shape[1] - 5 * self.d - 20

    @property
    def m(self) -> int:
        return self.W_c.shape[1]

    @property
    def dtype(self):
        return self.W_c.dtype

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def astype(self, dtype) -> "CellParams":
        return replace(self, **{k: v.astype(dtype) for k, v in self.tensors().items()})

    def copy(self) -> "CellParams":
        return replace(self, **{k: v.copy() for k, v in self.tensors().items()})

    def zeros_like(self) -> "CellParams":
        return replace(self, **{k: np.zeros_like(v) for k, v in self.tensors().items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.tensors().values()])

    def n_params(self) -> int:
        return sum(v.size for v in self.tensors().values())

    def fused(self):
        """Stacked (W, b) for all four s-driven blocks: [c~ | g_ci | g_c~ | g_o]."""
        W = np.concatenate([self.W_c, self.W_gci, self.W_gct, self.W_go], axis=0)
        b = np.concatenate([self.b_c, self.b_gci, self.b_gct, self.b_go])
        return W, b

    def validate(self) -> None:
        d, m = self.d, self.m
        if self.d_x < 1:
            raise InvalidArgument(f"inconsistent widths: m={m}, d={d}")
        shapes = param_shapes(d, self.d_x)
        for name, shape in shapes.items():
            got = getattr(self, name).shape
            if got != shape:
                raise InvalidArgument(f"{name}: expected shape {shape}, got {got}")


def param_shapes(d: int, d_x: int) -> dict[str, tuple[int, ...]]:
    m = input_width(d, d_x)
    return {
        "W_c": (d, m), "b_c": (d,), "W_gci": (4 * d, m), "b_gci": (4 * d,),
        "W_gct": (d, m), "b_gct": (d,), "W_go": (4 * d, m), "b_go": (4 * d,),
        "b_o": (4 * d,), "W_y": (5, d), "b_y": (5,), "h_seed": (d,),
        "ln_gain": (d,), "ln_bias": (d,),
    }


def init_params(d: int, d_x: int, rng: np.random.Generator, dtype=np.float32) -> CellParams:
    """Glorot-uniform weights, zero biases, unit LN gain, small random seed vector."""
    shapes = param_shapes(d, d_x)
    t = {}
    for name, shape in shapes.items():
        if name.startswith("W_"):
            fan_out, fan_in = shape
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            t[name] = rng.uniform(-lim, lim, size=shape)
        elif name == "h_seed":
            t[name] = rng.normal(0.0, 0.1, size=shape)
        elif name == "ln_gain":
            t[name] = np.ones(shape)
        else:
            t[name] = np.zeros(shape)
    return CellParams(**{k: v.astype(dtype) for k, v in t.items()})


def zero_params(d: int, d_x: int, dtype=np.float64) -> CellParams:
    return CellParams(**{k: np.zeros(s, dtype=dtype) for k, s in param_shapes(d, d_x).items()})


def rowdot(a: np.ndarray, wt: np.ndarray) -> np.ndarray:
    """``a @ wt`` computed as independent per-row products (row-stable)."""
    return np.matmul(a[:, None, :], wt)[:, 0, :]


def sigmoid(z):
    return 0.5 * (np.tanh(0.5 * z) + 1.0)


def _concat_s(x, y_in, h_in):
    n = x.shape[0]
    return np.concatenate([x, y_in.reshape(n, -1), h_in.reshape(n, -1)], axis=1)


def assemble_s(inputs: "NodeInputs", d: int | None = None, d_x: int | None = None) -> np.ndarray:
    """Concatenate ``[x | y_in (b,r,l,t) | h_in (c,b,r,l,t)]`` for one node."""
    x = np.asarray(inputs.x).ravel()
    y_in = np.asarray(inputs.y_in)
    h_in = np.asarray(inputs.h_in)
    if d is None:
        d = np.asarray(inputs.c_in).shape[-1]
    if y_in.size != 4 * N_CLASSES:
        raise InvalidArgument(f"y_in must carry 4 x 5 values, got {y_in.size}")
    if d is not None and h_in.size != 5 * d:
        raise InvalidArgument(f"h_in must carry 5 x {d} values, got {h_in.size}")
    if d_x is not None and x.size != d_x:
        raise InvalidArgument(f"x must have {d_x} features, got {x.size}")
    return _concat_s(x[None], y_in[None], h_in[None])[0]


def layer_norm(v, gain, bias, eps=LN_EPS):
    out, _, _ = _ln_forward(np.atleast_2d(v), gain, bias, eps)
    return out[0] if np.ndim(v) == 1 else out


def _ln_forward(u, gain, bias, eps):
    mu = u.mean(axis=-1, keepdims=True)
    xc = u - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return gain * xhat + bias, xhat, inv


@dataclass
class NodeInputs:
    x: np.ndarray     # (d_x,)
    c_in: np.ndarray  # (4, d) slots b, r, l, t
    h_in: np.ndarray  # (5, d) slots c, b, r, l, t
    y_in: np.ndarray  # (4, 5) slots b, r, l, t


@dataclass
class NodeOutputs:
    c: np.ndarray       # (d,)
    h_out: np.ndarray   # (4, d) messages toward b, r, l, t
    y: np.ndarray       # (5,)
    logits: np.ndarray  # (5,)


def cell_forward(p: CellParams, x, c_in, h_in, y_in, fused=None):
    """Forward a stack of nodes; returns (c, h_out, y, logits) and the tape."""
    dt = p.dtype
    n = x.shape[0]
    d = p.d
    x = np.asarray(x, dtype=dt)
    c_in = np.asarray(c_in, dtype=dt)
    h_in = np.asarray(h_in, dtype=dt)
    y_in = np.asarray(y_in, dtype=dt)
    if c_in.shape != (n, 4, d) or h_in.shape != (n, 5, d) or y_in.shape != (n, 4, 5):
        raise InvalidArgument("cell input shapes do not match the parameters")

    if x.shape[1] != p.d_x:
        raise InvalidArgument(f"x has {x.shape[1]} features, parameters expect {p.d_x}")
    s = _concat_s(x, y_in, h_in)
    if s.shape[1] != p.m:
        raise InvalidArgument(f"assembled input has width {s.shape[1]}, parameters expect {p.m}")
    if fused is None:
        W, b = p.fused()
        fused = (np.ascontiguousarray(W.T), b)
    WT, b = fused
    z = rowdot(s, WT) + b
    ct = np.tanh(z[:, :d])
    gci = sigmoid(z[:, d:5 * d]).reshape(n, 4, d)
    gct = sigmoid(z[:, 5 * d:6 * d])
    go = sigmoid(z[:, 6 * d:]).reshape(n, 4, d)

    u = ct * gct
    for j in range(4):
        u = u + c_in[:, j] * gci[:, j]
    if p.layer_norm:
        c, xhat, inv = _ln_forward(u, p.ln_gain, p.ln_bias, p.ln_eps)
    else:
        c, xhat, inv = u, None, None

    th = np.tanh(c)
    h_out = th[:, None, :] * go + p.b_o.reshape(4, d)
    logits = rowdot(c, np.ascontiguousarray(p.W_y.T)) + p.b_y
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    y = e / e.sum(axis=1, keepdims=True)

    if not (np.isfinite(c).all() and np.isfinite(y).all()):
        raise NumericFailure("non-finite local state or indicator in cell forward")
    tape = dict(s=s, c_in=c_in, ct=ct, gci=gci, gct=gct, go=go, xhat=xhat, inv=inv,
                c=c, th=th, y=y, d=d, layer_norm=p.layer_norm)
    return (c, h_out, y, logits), tape


def cell_backward(p: CellParams, tape, dc, dh_out, dy=None, dlogits=None, grads: CellParams | None = None):
    """Exact adjoint of :func:`cell_forward`.

    ``dc``, ``dh_out`` and ``dy`` are gradients w.r.t. the outputs c, h_out and
    y (``dy`` goes through the softmax Jacobian); ``dlogits`` is added directly
    at the logits. Parameter gradients are accumulated into ``grads`` (created
    if absent). Returns ``(dx, dc_in, dh_in, dy_in), grads``.
    """
    if tape["d"] != p.d or tape["layer_norm"] != p.layer_norm or tape["s"].shape[1] != p.m:
        raise InvalidArgument("tape was produced with different parameters")
    if grads is None:
        grads = p.zeros_like()
    d = p.d
    s, y, c, th = tape["s"], tape["y"], tape["c"], tape["th"]
    n = s.shape[0]

    dl = np.zeros_like(y) if dlogits is None else np.array(dlogits, dtype=y.dtype)
    if dy is not None:
        dl += y * (dy - (dy * y).sum(axis=1, keepdims=True))
    grads.W_y += dl.T @ c
    grads.b_y += dl.sum(axis=0)
    dc = dc + dl @ p.W_y

    go = tape["go"]
    grads.b_o += dh_out.sum(axis=0).reshape(-1)
    dth = (dh_out * go).sum(axis=1)
    dgo = dh_out * th[:, None, :]
    dc = dc + dth * (1.0 - th * th)

    if tape["layer_norm"]:
        xhat, inv = tape["xhat"], tape["inv"]
        grads.ln_gain += (dc * xhat).sum(axis=0)
        grads.ln_bias += dc.sum(axis=0)
        dxh = dc * p.ln_gain
        du = inv * (dxh - dxh.mean(axis=1, keepdims=True)
                    - xhat * (dxh * xhat).mean(axis=1, keepdims=True))
    else:
        du = dc

    gci, gct, ct, c_in = tape["gci"], tape["gct"], tape["ct"], tape["c_in"]
    dc_in = du[:, None, :] * gci
    dz = np.empty((n, 10 * d), dtype=s.dtype)
    dz[:, :d] = du * gct * (1.0 - ct * ct)
    dz[:, d:5 * d] = (du[:, None, :] * c_in * gci * (1.0 - gci)).reshape(n, 4 * d)
    dz[:, 5 * d:6 * d] = du * ct * gct * (1.0 - gct)
    dz[:, 6 * d:] = (dgo * go * (1.0 - go)).reshape(n, 4 * d)

    dW = dz.T @ s
    db = dz.sum(axis=0)
    grads.W_c += dW[:d]
    grads.W_gci += dW[d:5 * d]
    grads.W_gct += dW[5 * d:6 * d]
    grads.W_go += dW[6 * d:]
    grads.b_c += db[:d]
    grads.b_gci += db[d:5 * d]
    grads.b_gct += db[5 * d:6 * d]
    grads.b_go += db[6 * d:]

    W, _ = p.fused()
    ds = dz @ W
    dx_w = p.d_x
    dx = ds[:, :dx_w]
    dy_in = ds[:, dx_w:dx_w + 20].reshape(n, 4, 5)
    dh_in = ds[:, dx_w + 20:].reshape(n, 5, d)
    return (dx, dc_in, dh_in, dy_in), grads


def node_forward(p: CellParams, inputs: NodeInputs):
    (c, h_out, y, logits), tape = cell_forward(
        p, np.asarray(inputs.x)[None], np.asarray(inputs.c_in)[None],
        np.asarray(inputs.h_in)[None], np.asarray(inputs.y_in)[None])
    return NodeOutputs(c[0], h_out[0], y[0], logits[0]), tape


def node_backward(p: CellParams, tape, dc=None, dh_out=None, dy=None, label=None, weight=1.0):
    """Single-node adjoint.

    ``label`` (a class index) adds the cross-entropy logit gradient
    ``weight * (y - onehot)``. Returns ``(NodeInputs of gradients, CellParams of gradients)``.
    """
    d = p.d
    dt = p.dtype
    dc = np.zeros((1, d), dt) if dc is None else np.asarray(dc, dt).reshape(1, d)
    dh_out = np.zeros((1, 4, d), dt) if dh_out is None else np.asarray(dh_out, dt).reshape(1, 4, d)
    dyv = None if dy is None else np.asarray(dy, dt).reshape(1, 5)
    dl = None
    if label is not None:
        dl = tape["y"].copy()
        dl[0, int(label)] -= 1.0
        dl *= weight
    (dx, dc_in, dh_in, dy_in), g = cell_backward(p, tape, dc, dh_out, dyv, dl)
    return NodeInputs(dx[0], dc_in[0], dh_in[0], dy_in[0]), g
