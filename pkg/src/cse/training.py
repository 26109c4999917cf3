"""Adam training loop, batch assembly with grid augmentation, and checkpoints."""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .cell import PARAM_NAMES, CellParams, init_params, param_shapes
from .detect import gt_grid
from .errors import FormatError, InvalidArgument, NumericFailure
from .grid import GridSpec, compute_sections, perturb_grid, sample_mask
from .sampling import bilinear_sample
from .supervision import loss_and_grads

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"CSE1"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    lr0: float = 1e-3
    decay: float = 0.9
    decay_every: int = 2000
    iters: int = 20000
    batch: int = 10
    d: int = 32
    d_x: int = 8
    S: int = 25
    seed: int = 0
    ds_range: tuple[float, float] = (1.0, 1.6)
    dc_range: tuple[float, float] = (0.0, 1.0)
    shift_frac: float = 0.15     # max grid-centre shift, fraction of the box side
    min_overlap: float = 0.4     # grid/box overlap, fraction of the GT box area
    clip_norm: float = 5.0
    lr_milestones: tuple = ()    # ((step, lr), ...) fixed-rate overrides
    log_every: int = 100

    def __post_init__(self):
        if not self.lr0 > 0:
            raise InvalidArgument("lr0 must be positive")
        if not 0 < self.decay <= 1:
            raise InvalidArgument("decay must lie in (0, 1]")
        if self.batch < 1 or self.decay_every < 1 or self.iters < 0:
            raise InvalidArgument("batch and decay_every must be >= 1, iters >= 0")
        self.ds_range = tuple(self.ds_range)
        self.dc_range = tuple(self.dc_range)
        self.lr_milestones = tuple(tuple(m) for m in self.lr_milestones)


# Full-scale schedules with real-data volumes in mind; the default config is the desk-scale one.
PRESETS = {
    "pretrain": dict(lr0=0.01, decay=1.0, lr_milestones=((30000, 0.002),), iters=50000),
    "finetune": dict(lr0=0.001, decay=0.9, decay_every=5000),
}


def lr_at(step: int, cfg: TrainConfig) -> float:
    lr = cfg.lr0 * cfg.decay ** (step // cfg.decay_every)
    for at, fixed in cfg.lr_milestones:
        if step >= at:
            lr = min(lr, fixed)
    return lr


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: CellParams, grads: CellParams, state: AdamState, lr: float) -> CellParams:
    """In-place bias-corrected Adam update; returns ``params``."""
    for name, g in grads.tensors().items():
        if not np.all(np.isfinite(g)):
            raise NumericFailure(f"non-finite gradient for {name}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.tensors().items():
        g = getattr(grads, name)
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return params


def clip_global_norm(grads: CellParams, max_norm: float) -> float:
    norm = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.tensors().values())))
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        for g in grads.tensors().values():
            g *= scale
    return norm


def box_overlap(grid: GridSpec, box) -> float:
    """Area of (grid extent ∩ box) as a fraction of the box area."""
    gx0, gy0 = grid.origin
    gx1, gy1 = gx0 + grid.width, gy0 + grid.height
    x, y, w, h = box
    iw = max(0.0, min(gx1, x + w) - max(gx0, x))
    ih = max(0.0, min(gy1, y + h) - max(gy0, y))
    return iw * ih / (w * h)


@dataclass
class Sample:
    values: np.ndarray   # (S, S, d_x)
    grid: GridSpec
    plan: object
    mask: np.ndarray     # node-level ground truth
    augmented: bool


def training_items(scenes) -> list:
    items = []
    for s, sc in enumerate(scenes):
        for inst in sc.instances:
            if inst.mask is None or not np.any(inst.mask):
                raise InvalidArgument(f"scene {s} has an instance without a mask")
            items.append((sc.features, inst))
    if not items:
        raise InvalidArgument("dataset is empty")
    return items


class BatchMaker:
    """Draws training batches; half ground-truth grids, half augmented ones."""

    def __init__(self, scenes, cfg: TrainConfig):
        self.items = training_items(scenes)
        self.cfg = cfg
        self._gt: dict[int, GridSpec] = {}

    def gt(self, k: int) -> GridSpec:
        if k not in self._gt:
            self._gt[k] = gt_grid(self.items[k][1], self.cfg.S)
        return self._gt[k]

    def augment(self, k: int, rng: np.random.Generator) -> GridSpec:
        cfg = self.cfg
        base = self.gt(k)
        inst = self.items[k][1]
        for _ in range(100):
            ds = rng.uniform(*cfg.ds_range)
            dc = rng.uniform(*cfg.dc_range)
            x, y, w, h = inst.box
            shift = (rng.uniform(-1, 1) * cfg.shift_frac * w, rng.uniform(-1, 1) * cfg.shift_frac * h)
            try:
                g = perturb_grid(base, ds, dc, inst.mask, rng, shift=shift)
            except InvalidArgument:
                continue
            if box_overlap(g, inst.box) >= cfg.min_overlap and sample_mask(g, inst.mask)[g.seed]:
                return g
        return base

    def sample(self, k: int, grid: GridSpec, augmented: bool) -> Sample:
        feats, inst = self.items[k]
        return Sample(bilinear_sample(feats, grid).values, grid, compute_sections(grid),
                      sample_mask(grid, inst.mask), augmented)

    def __call__(self, rng: np.random.Generator, batch: int | None = None) -> list[Sample]:
        batch = batch or self.cfg.batch
        n_aug = batch // 2
        out = []
        for i in range(batch):
            k = int(rng.integers(len(self.items)))
            aug = i >= batch - n_aug
            g = self.augment(k, rng) if aug else self.gt(k)
            out.append(self.sample(k, g, aug))
        return out


def make_batch(scenes, cfg: TrainConfig, rng: np.random.Generator) -> list[Sample]:
    return BatchMaker(scenes, cfg)(rng)


@dataclass
class TrainLog:
    losses: list[float] = field(default_factory=list)
    rows: list[tuple[int, float, float]] = field(default_factory=list)  # (step, lr, mean loss)

    def to_csv(self) -> str:
        lines = ["step,lr,loss"]
        lines += [f"{s},{lr:.8g},{loss:.8f}" for s, lr, loss in self.rows]
        return "\n".join(lines) + "\n"


def fit(scenes, cfg: TrainConfig, params: CellParams | None = None, callback=None):
    """Train on ``scenes``; returns ``(params, TrainLog)``.

    Labels are recomputed from the current prediction at every step. The run
    is a pure function of ``cfg`` (including its seed) and the data.
    """
    maker = BatchMaker(scenes, cfg)
    init_ss, data_ss = np.random.SeedSequence(cfg.seed).spawn(2)
    if params is None:
        params = init_params(cfg.d, cfg.d_x, np.random.default_rng(init_ss))
    rng = np.random.default_rng(data_ss)
    opt = AdamState()
    tlog = TrainLog()
    window = []
    for step in range(cfg.iters):
        lr = lr_at(step, cfg)
        batch = maker(rng)
        values = np.stack([s.values for s in batch])
        loss, grads, _, _ = loss_and_grads(params, values, [s.plan for s in batch], [s.mask for s in batch])
        clip_global_norm(grads, cfg.clip_norm)
        adam_step(params, grads, opt, lr)
        tlog.losses.append(loss)
        window.append(loss)
        if (step + 1) % cfg.log_every == 0:
            row = (step + 1, lr, float(np.mean(window)))
            tlog.rows.append(row)
            window = []
            log.info("step %d lr %.3g loss %.5f", *row)
            if callback is not None:
                callback(row, params)
    return params, tlog


# --- checkpoints -------------------------------------------------------------

def save_checkpoint(params: CellParams, path, S: int = 25) -> None:
    tensors = params.tensors()
    header = {
        "version": CHECKPOINT_VERSION,
        "d": params.d,
        "d_x": params.d_x,
        "S": int(S),
        "ln_eps": float(params.ln_eps),
        "layer_norm": bool(params.layer_norm),
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in tensors.items()],
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(hb)))
        fh.write(hb)
        for v in tensors.values():
            fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def read_checkpoint(path) -> tuple[CellParams, dict]:
    data = Path(path).read_bytes()
    if len(data) < 8 or data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic (offset 0)")
    (hlen,) = struct.unpack_from("<I", data, 4)
    if 8 + hlen > len(data):
        raise FormatError(f"{path}: header runs past end of file (offset 8)")
    try:
        header = json.loads(data[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: unreadable header (offset 8): {e}") from None
    if header.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported version {header.get('version')!r} (offset 8)")
    try:
        d, d_x = int(header["d"]), int(header["d_x"])
        entries = header["tensors"]
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{path}: incomplete header: {e}") from None
    want = param_shapes(d, d_x)
    names = [e.get("name") for e in entries]
    if names != list(PARAM_NAMES):
        raise FormatError(f"{path}: unexpected tensor list {names}")
    off = 8 + hlen
    t = {}
    for e in entries:
        shape = tuple(e["shape"])
        if shape != want[e["name"]]:
            raise FormatError(f"{path}: tensor {e['name']} has shape {shape}, expected {want[e['name']]} for d={d}")
        n = int(np.prod(shape))
        if off + 4 * n > len(data):
            raise FormatError(f"{path}: truncated body in tensor {e['name']} (offset {off})")
        t[e["name"]] = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(shape).astype(np.float32)
        off += 4 * n
    if off != len(data):
        raise FormatError(f"{path}: {len(data) - off} trailing bytes after tensors (offset {off})")
    params = CellParams(**t, ln_eps=float(header.get("ln_eps", 1e-5)),
                        layer_norm=bool(header.get("layer_norm", True)))
    return params, header


def load_checkpoint(path) -> CellParams:
    return read_checkpoint(path)[0]


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
