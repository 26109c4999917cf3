"""Synthetic curved-ribbon scenes standing in for curve-text instances.

Feature maps are rendered from the *union* of instance masks only, so any
ability to separate touching instances has to come from the seed and the
expansion context, not from the features.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.interpolate import splev, splprep
from skimage.draw import polygon as fill_polygon

from .errors import FormatError, InvalidArgument
from .pnm import read_mask, write_pgm
from .sampling import read_features, write_features

GENERATOR_VERSION = "cse-synth/1"
TOUCH_GAP = 3.0
CROSS4 = ndimage.generate_binary_structure(2, 1)


@dataclass
class RibbonParams:
    canvas: tuple[int, int] = (256, 256)
    length: tuple[float, float] = (90.0, 190.0)
    half_width: tuple[float, float] = (7.0, 14.0)
    turn: tuple[float, float] = (0.0, 1.6)      # total turning angle of the centreline, radians
    tilt: float = 0.35                            # max |tangent angle| at the midpoint, radians
    aspect: tuple[float, float] = (4.0, 20.0)     # length / width
    width_jitter: float = 0.15                    # per-control-point half-width spread
    n_ctrl: int = 6
    samples: int = 64


@dataclass
class RibbonSpec:
    centerline: np.ndarray   # (n_ctrl, 2) control points (x, y)
    half_widths: np.ndarray  # (n_ctrl,)
    samples: int = 64

    def outline(self) -> np.ndarray:
        """Closed polygon (x, y): left offset forward, right offset backward."""
        tck, u = splprep(self.centerline.T, s=0, k=min(3, len(self.centerline) - 1))
        uu = np.linspace(0.0, 1.0, self.samples)
        x, y = splev(uu, tck)
        dx, dy = splev(uu, tck, der=1)
        norm = np.hypot(dx, dy)
        nx, ny = -dy / norm, dx / norm
        w = np.interp(uu, u, self.half_widths)
        left = np.stack([x + nx * w, y + ny * w], axis=1)
        right = np.stack([x - nx * w, y - ny * w], axis=1)
        return np.concatenate([left, right[::-1]])


@dataclass
class Instance:
    polygon: np.ndarray  # (n, 2) image-space (x, y)
    mask: np.ndarray     # (H, W) bool
    box: tuple[float, float, float, float] = field(default=None)

    def __post_init__(self):
        if self.box is None:
            self.box = mask_box(self.mask)


@dataclass
class Scene:
    features: np.ndarray  # (H, W, d_x) float32
    instances: list[Instance]

    @property
    def shape(self):
        return self.features.shape[:2]


def mask_box(mask: np.ndarray) -> tuple[float, float, float, float]:
    """Tight (x, y, w, h) box through the centres of the extreme pixels."""
    ii, jj = np.nonzero(mask)
    x0, x1, y0, y1 = jj.min(), jj.max(), ii.min(), ii.max()
    return float(x0), float(y0), float(max(x1 - x0, 1)), float(max(y1 - y0, 1))


def rasterize(poly: np.ndarray, shape) -> np.ndarray:
    """Pixels whose centre (x=j, y=i) falls inside the polygon."""
    rr, cc = fill_polygon(poly[:, 1], poly[:, 0], shape=shape)
    out = np.zeros(shape, dtype=bool)
    out[rr, cc] = True
    return out


def is_4connected(mask: np.ndarray) -> bool:
    _, n = ndimage.label(mask, structure=CROSS4)
    return n == 1


def _centerline(rng, L, turn, tilt, n_ctrl):
    t = np.linspace(-0.5, 0.5, 401)
    ang = tilt + turn * t
    ds = L / (len(t) - 1)
    x = np.concatenate([[0.0], np.cumsum(np.cos(ang[:-1]) * ds)])
    y = np.concatenate([[0.0], np.cumsum(np.sin(ang[:-1]) * ds)])
    pick = np.linspace(0, len(t) - 1, n_ctrl).round().astype(int)
    pts = np.stack([x[pick], y[pick]], axis=1)
    return pts - pts.mean(axis=0)


def gen_ribbon(rng: np.random.Generator, params: RibbonParams | None = None, max_tries: int = 200):
    """Random smooth ribbon placed fully inside the canvas.

    Returns ``(RibbonSpec, mask)``; the mask is the polygon raster and is
    4-connected.
    """
    p = params or RibbonParams()
    H, W = p.canvas
    if H < 64 or W < 64:
        raise InvalidArgument(f"canvas must be at least 64x64, got {p.canvas}")
    lo_w, hi_w = p.half_width
    lo_l, hi_l = p.length
    if lo_w <= 0 or hi_w < lo_w or hi_l < lo_l or lo_l <= 0:
        raise InvalidArgument("ribbon ranges must be positive and ordered")
    if lo_l + 2 * lo_w > min(H, W) - 4 or lo_l < 2 * 2 * lo_w:
        raise InvalidArgument("ribbon ranges are infeasible for the canvas")

    for _ in range(max_tries):
        hw = rng.uniform(lo_w, hi_w)
        L = rng.uniform(lo_l, hi_l)
        if not (p.aspect[0] <= L / (2 * hw) <= p.aspect[1]):
            continue
        turn = rng.uniform(*p.turn) * rng.choice([-1.0, 1.0])
        if abs(turn) > 1e-9 and L / abs(turn) < 2.5 * hw:
            continue  # inner offset would fold
        tilt = rng.uniform(-p.tilt, p.tilt)
        ctrl = _centerline(rng, L, turn, tilt, p.n_ctrl)
        widths = hw * rng.uniform(1 - p.width_jitter, 1 + p.width_jitter, size=p.n_ctrl)
        spec = RibbonSpec(ctrl, widths, p.samples)
        poly = spec.outline()
        lo = poly.min(axis=0)
        hi = poly.max(axis=0)
        span = hi - lo
        if span[0] > W - 6 or span[1] > H - 6:
            continue
        off = np.array([rng.uniform(3 - lo[0], W - 3 - hi[0]), rng.uniform(3 - lo[1], H - 3 - hi[1])])
        spec = RibbonSpec(ctrl + off, widths, p.samples)
        mask = rasterize(spec.outline(), (H, W))
        if mask.sum() > 0 and is_4connected(mask):
            return spec, mask
    raise InvalidArgument("could not generate a ribbon with the given ranges")


def render_features(masks, sigma: float = 0.1, rng: np.random.Generator | None = None,
                    d_x: int = 8, shape=None) -> np.ndarray:
    """Eight-channel instance-agnostic feature map from the union of masks.

    0 occupancy, 1 occupancy box-blurred twice (3x3), 2 signed distance to the
    union boundary clamped to +-8 px and scaled to +-1 (positive inside),
    3/4 horizontal/vertical gradient of channel 1, 5.. unit Gaussian noise.
    Channels 0-4 get Gaussian noise of deviation ``sigma``.
    """
    if d_x < 5:
        raise InvalidArgument("need at least 5 feature channels")
    rng = rng if rng is not None else np.random.default_rng(0)
    masks = list(masks)
    if shape is None:
        shape = masks[0].shape
    union = np.zeros(shape, dtype=bool)
    for m in masks:
        union |= m
    occ = union.astype(np.float64)
    blur = ndimage.uniform_filter(ndimage.uniform_filter(occ, 3, mode="nearest"), 3, mode="nearest")
    inside = ndimage.distance_transform_edt(union)
    outside = ndimage.distance_transform_edt(~union)
    sdist = np.clip(np.where(union, inside, -outside), -8.0, 8.0) / 8.0
    gy, gx = np.gradient(blur)
    out = np.empty(shape + (d_x,), dtype=np.float64)
    out[..., 0] = occ
    out[..., 1] = blur
    out[..., 2] = sdist
    out[..., 3] = gx
    out[..., 4] = gy
    if sigma > 0:
        out[..., :5] += rng.normal(0.0, sigma, size=shape + (5,))
    out[..., 5:] = rng.normal(0.0, 1.0, size=shape + (d_x - 5,))
    return out.astype(np.float32)


def mask_gap(a: np.ndarray, b: np.ndarray) -> float:
    """Smallest distance between pixel centres of two masks (0 if they overlap)."""
    if (a & b).any():
        return 0.0
    return float(ndimage.distance_transform_edt(~a)[b].min())


def _shifted_mask(mask, dx, dy):
    H, W = mask.shape
    ii, jj = np.nonzero(mask)
    ii = ii + dy
    jj = jj + dx
    if ii.min() < 2 or jj.min() < 2 or ii.max() > H - 3 or jj.max() > W - 3:
        return None
    out = np.zeros_like(mask)
    out[ii, jj] = True
    return out


def _place_touching(rng, a_mask, a_spec, b_spec, b_mask, max_shift=400):
    """Translate ribbon B toward A's side until the gap is within (1, 3] px."""
    edt_a = ndimage.distance_transform_edt(~a_mask)
    ca = a_spec.centerline
    tang = ca[-1] - ca[0]
    perp = np.array([-tang[1], tang[0]]) / (np.linalg.norm(tang) + 1e-12)
    perp *= rng.choice([-1.0, 1.0])
    ang = rng.uniform(-0.3, 0.3)
    u = np.array([perp[0] * math.cos(ang) - perp[1] * math.sin(ang),
                  perp[0] * math.sin(ang) + perp[1] * math.cos(ang)])
    # start with B's centre on A's centre
    ib, jb = np.nonzero(b_mask)
    ia, ja = np.nonzero(a_mask)
    base = np.array([ja.mean() - jb.mean(), ia.mean() - ib.mean()])
    H, W = a_mask.shape
    for t in np.arange(0.0, max_shift, 0.5):
        dx, dy = np.round(base + t * u).astype(int)
        ii = ib + dy
        jj = jb + dx
        ok = (ii >= 0) & (ii < H) & (jj >= 0) & (jj < W)
        if ok.all():
            if a_mask[ii, jj].any():
                continue
            gap = edt_a[ii, jj].min()
        else:
            inside = edt_a[ii[ok], jj[ok]] if ok.any() else np.array([np.inf])
            if ok.any() and a_mask[ii[ok], jj[ok]].any():
                continue
            gap = inside.min() if inside.size else np.inf
        if gap > TOUCH_GAP:
            return None
        if gap >= 2.0:
            moved = _shifted_mask(b_mask, dx, dy)
            if moved is None:
                return None
            return moved, b_spec.centerline + [dx, dy], gap
    return None


def gen_scene(rng: np.random.Generator, n_instances: int = 1, touching: bool = False,
              params: RibbonParams | None = None, d_x: int = 8, sigma: float = 0.1,
              max_tries: int = 100) -> Scene:
    """Scene with ``n_instances`` disjoint ribbons and its feature map.

    With ``touching`` the first two ribbons are stacked with a gap of 2-3 px
    (measured between pixel centres); every other pair is more than 3 px apart.
    """
    if not 1 <= n_instances <= 4:
        raise InvalidArgument(f"n_instances must be in 1..4, got {n_instances}")
    p = params or RibbonParams()
    for attempt in range(3):
        scale = 0.8 ** attempt
        q = RibbonParams(**{**p.__dict__, "length": (p.length[0] * scale, p.length[1] * scale)})
        for _ in range(max_tries):
            placed = _try_place(rng, n_instances, touching, q)
            if placed is not None:
                insts = [Instance(spec_poly, m) for spec_poly, m in placed]
                feats = render_features([i.mask for i in insts], sigma, rng, d_x, shape=q.canvas)
                return Scene(feats, insts)
    raise InvalidArgument("could not place the requested instances on the canvas")


def _try_place(rng, n, touching, p):
    spec0, m0 = gen_ribbon(rng, p)
    placed = [(spec0, m0)]
    if touching and n >= 2:
        q = RibbonParams(**{**p.__dict__, "tilt": 0.0})
        spec1, m1 = gen_ribbon(rng, q)
        # rotate B's generation frame to A's tilt by regenerating around A's direction
        ca = spec0.centerline
        ang_a = math.atan2(ca[-1, 1] - ca[0, 1], ca[-1, 0] - ca[0, 0])
        if abs(ang_a) > math.pi / 2:
            ang_a -= math.copysign(math.pi, ang_a)
        spec1 = _rotate(spec1, ang_a)
        H, W = p.canvas
        spec1 = RibbonSpec(spec1.centerline - spec1.centerline.mean(axis=0) + [W / 2, H / 2],
                           spec1.half_widths, spec1.samples)
        if not _inside_canvas(spec1.outline(), p.canvas):
            return None
        m1 = rasterize(spec1.outline(), p.canvas)
        if not m1.any() or not is_4connected(m1):
            return None
        res = _place_touching(rng, m0, spec0, spec1, m1)
        if res is None:
            return None
        m1, ctrl1, _ = res
        spec1 = RibbonSpec(ctrl1, spec1.half_widths, spec1.samples)
        if not _inside_canvas(spec1.outline(), p.canvas):
            return None
        m1 = rasterize(spec1.outline(), p.canvas)
        g = mask_gap(m0, m1)
        if not (0 < g <= TOUCH_GAP) or not is_4connected(m1):
            return None
        placed.append((spec1, m1))
    while len(placed) < n:
        for _ in range(30):
            spec, m = gen_ribbon(rng, p)
            if all(mask_gap(m, other) > TOUCH_GAP for _, other in placed):
                placed.append((spec, m))
                break
        else:
            return None
    return [(s.outline(), m) for s, m in placed]


def _inside_canvas(poly, shape, margin=2.0):
    H, W = shape
    lo = poly.min(axis=0)
    hi = poly.max(axis=0)
    return lo[0] >= margin and lo[1] >= margin and hi[0] <= W - 1 - margin and hi[1] <= H - 1 - margin


def _rotate(spec: RibbonSpec, ang: float) -> RibbonSpec:
    c, s = math.cos(ang), math.sin(ang)
    ctr = spec.centerline.mean(axis=0)
    d = spec.centerline - ctr
    rot = np.stack([d[:, 0] * c - d[:, 1] * s, d[:, 0] * s + d[:, 1] * c], axis=1)
    return RibbonSpec(rot + ctr, spec.half_widths, spec.samples)


# --- datasets on disk -------------------------------------------------------

def gen_dataset(n_scenes: int, seed: int, instances=(1, 1), touching_prob: float = 0.0,
                params: RibbonParams | None = None, d_x: int = 8, sigma: float = 0.1,
                threads: int = 1) -> list[Scene]:
    """Scenes from independent substreams of ``seed``; order and content do not depend on ``threads``."""
    lo, hi = instances
    if not (1 <= lo <= hi <= 4):
        raise InvalidArgument(f"instance range must lie within 1..4, got {lo}..{hi}")
    streams = np.random.SeedSequence(seed).spawn(n_scenes)

    def one(ss):
        rng = np.random.default_rng(ss)
        n = int(rng.integers(lo, hi + 1))
        touching = n >= 2 and rng.random() < touching_prob
        return gen_scene(rng, n, touching, params, d_x, sigma)

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            return list(ex.map(one, streams))
    return [one(s) for s in streams]


def write_dataset(root, scenes: list[Scene], meta: dict | None = None) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for k, sc in enumerate(scenes):
        sid = f"scene_{k:05d}"
        write_features(root / f"{sid}.csef", sc.features)
        insts = []
        for q, inst in enumerate(sc.instances):
            mname = f"{sid}_inst{q}.pgm"
            write_pgm(root / mname, inst.mask)
            insts.append({
                "polygon": [[round(float(x), 4), round(float(y), 4)] for x, y in inst.polygon],
                "box": [round(float(v), 4) for v in inst.box],
                "mask_file": mname,
            })
        entries.append({"id": sid, "feature_file": f"{sid}.csef", "instances": insts})
    manifest = {"version": 1, "generator": GENERATOR_VERSION, **(meta or {}), "scenes": entries}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return root


def read_dataset(root) -> list[Scene]:
    root = Path(root)
    mpath = root / "manifest.json"
    try:
        manifest = json.loads(mpath.read_text())
    except FileNotFoundError:
        raise FormatError(f"{mpath}: missing dataset manifest") from None
    except json.JSONDecodeError as e:
        raise FormatError(f"{mpath}: {e}") from None
    scenes = []
    for entry in manifest.get("scenes", []):
        feats = read_features(root / entry["feature_file"])
        insts = []
        for inst in entry["instances"]:
            if "mask_file" not in inst:
                raise InvalidArgument(f"{mpath}: scene {entry['id']} has an instance without a mask")
            mask = read_mask(root / inst["mask_file"])
            if mask.shape != feats.shape[:2]:
                raise FormatError(f"{root / inst['mask_file']}: mask shape {mask.shape} != features {feats.shape[:2]}")
            insts.append(Instance(np.asarray(inst["polygon"], dtype=np.float64), mask, tuple(inst["box"])))
        scenes.append(Scene(feats, insts))
    return scenes
