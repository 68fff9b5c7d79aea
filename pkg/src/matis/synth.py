"""Deterministic synthetic scenes, videos and noisy proposal sets.

Every class has its own shape family and a hue-coded striped texture so a
per-frame model can learn it. Videos add two ambiguous class pairs: on
scheduled frames both members of a pair are drawn as the same grey disk,
so only their motion (horizontal for the first member, vertical for the
second) tells them apart.
"""
from __future__ import annotations

import colorsys
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import ConfigInvalid, PlacementFailure
from .structures import FrameAnnotation, ProposalSet

DEFAULT_NAMES = ("BF", "PF", "LND", "VS/SI", "GR/CA", "MCS", "UP")
DEFAULT_WEIGHTS = (0.28, 0.22, 0.16, 0.12, 0.10, 0.07, 0.05)

SHAPE_FAMILIES = ("round", "ellipse", "square", "rect", "hbar", "vbar", "diamond")


@dataclass
class SynthConfig:
    seed: int = 0
    height: int = 64
    width: int = 64
    num_classes: int = 7
    instances: tuple = (1, 4)
    multi_instance: tuple = (1, 2)
    class_weights: Optional[tuple] = None
    class_names: Optional[tuple] = None
    video_length: int = 48
    motion_step: float = 1.0
    motion_jitter: float = 1.0
    video_instances: tuple = (1, 3)
    ambiguous_pairs: tuple = ((2, 3), (5, 6))
    ambiguity_fraction: float = 0.6
    ambiguity_run: float = 8.0
    noise: float = 0.03

    def __post_init__(self):
        if not 1 <= self.num_classes <= 16:
            raise ConfigInvalid(f"num_classes must be in 1..16, got {self.num_classes}")
        self.instances = tuple(self.instances)
        self.video_instances = tuple(self.video_instances)
        self.multi_instance = tuple(int(c) for c in self.multi_instance)
        self.ambiguous_pairs = tuple(tuple(int(c) for c in p) for p in self.ambiguous_pairs)
        if self.class_weights is None:
            if self.num_classes == len(DEFAULT_WEIGHTS):
                self.class_weights = DEFAULT_WEIGHTS
            else:
                self.class_weights = tuple([1.0 / self.num_classes] * self.num_classes)
        self.class_weights = tuple(float(w) for w in self.class_weights)
        if self.class_names is None:
            if self.num_classes == len(DEFAULT_NAMES):
                self.class_names = DEFAULT_NAMES
            else:
                self.class_names = tuple(f"class{c}" for c in range(1, self.num_classes + 1))
        self.class_names = tuple(self.class_names)
        self.validate()

    def validate(self) -> None:
        if self.height < 16 or self.width < 16:
            raise ConfigInvalid(f"dims must be >= 16, got {self.height}x{self.width}")
        if not 1 <= self.num_classes <= 16:
            raise ConfigInvalid(f"num_classes must be in 1..16, got {self.num_classes}")
        if len(self.class_weights) != self.num_classes or abs(sum(self.class_weights) - 1.0) > 1e-6:
            raise ConfigInvalid("class_weights must have one entry per class and sum to 1")
        if min(self.class_weights) < 0:
            raise ConfigInvalid("class_weights must be non-negative")
        lo, hi = self.instances
        if not 1 <= lo <= hi:
            raise ConfigInvalid(f"bad instances range {self.instances}")
        if not 0.0 <= self.ambiguity_fraction <= 1.0:
            raise ConfigInvalid("ambiguity_fraction must lie in [0, 1]")
        for pair in self.ambiguous_pairs:
            if len(pair) != 2 or not all(1 <= c <= self.num_classes for c in pair):
                raise ConfigInvalid(f"bad ambiguous pair {pair}")

    @property
    def dims(self) -> tuple[int, int]:
        return self.height, self.width

    def multi_instance_flags(self) -> dict[int, bool]:
        return {c: c in self.multi_instance for c in range(1, self.num_classes + 1)}

    def class_table(self) -> list[dict]:
        return [
            {
                "id": c,
                "name": self.class_names[c - 1],
                "color": [round(float(x), 6) for x in class_color(c, self.num_classes)],
                "shape": SHAPE_FAMILIES[(c - 1) % len(SHAPE_FAMILIES)],
                "weight": self.class_weights[c - 1],
                "multi_instance": c in self.multi_instance,
            }
            for c in range(1, self.num_classes + 1)
        ]

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "SynthConfig":
        return cls(**doc)


def class_color(c: int, num_classes: int) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb((c - 1) / num_classes, 0.8, 0.9))


def pair_color(index: int) -> np.ndarray:
    greys = ((0.72, 0.72, 0.72), (0.5, 0.5, 0.58), (0.85, 0.8, 0.75))
    return np.array(greys[index % len(greys)])


def _rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng([int(k) & 0xFFFFFFFF for k in keys])


# shape geometry ------------------------------------------------------------


def _shape_params(c: int, rng: np.random.Generator, scale: float) -> dict:
    fam = SHAPE_FAMILIES[(c - 1) % len(SHAPE_FAMILIES)]
    u = rng.uniform
    if fam == "round":
        r = u(5.5, 8.0)
        p = dict(a=r, b=r * u(0.9, 1.0), angle=u(0, np.pi))
    elif fam == "ellipse":
        p = dict(a=u(9.0, 12.0), b=u(3.5, 5.0), angle=u(0, np.pi))
    elif fam == "square":
        s = u(5.0, 7.0)
        p = dict(a=s, b=s, angle=u(-0.2, 0.2))
    elif fam == "rect":
        p = dict(a=u(9.0, 11.0), b=u(3.0, 4.0), angle=u(0, np.pi))
    elif fam == "hbar":
        p = dict(a=u(11.0, 14.0), b=u(1.8, 2.4), angle=u(-0.15, 0.15))
    elif fam == "vbar":
        p = dict(a=u(11.0, 14.0), b=u(1.8, 2.4), angle=np.pi / 2 + u(-0.15, 0.15))
    else:
        p = dict(a=u(7.0, 9.0), b=u(7.0, 9.0), angle=u(-0.2, 0.2))
    p["a"] *= scale
    p["b"] *= scale
    p["family"] = fam
    return p


def _shape_mask(params: dict, cy: float, cx: float, dims: tuple[int, int]) -> np.ndarray:
    h, w = dims
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    ca, sa = np.cos(params["angle"]), np.sin(params["angle"])
    u = dx * ca + dy * sa
    v = -dx * sa + dy * ca
    a, b = params["a"], params["b"]
    fam = params["family"]
    if fam in ("round", "ellipse", "disk"):
        return (u / a) ** 2 + (v / b) ** 2 <= 1.0
    if fam == "diamond":
        return np.abs(u) / a + np.abs(v) / b <= 1.0
    return (np.abs(u) <= a) & (np.abs(v) <= b)


def _extent(params: dict) -> float:
    return max(params["a"], params["b"])


# rendering -----------------------------------------------------------------


def _texture(color: np.ndarray, c: int, dims: tuple[int, int]) -> np.ndarray:
    """Class-specific stripes modulating the base colour, shape (3, H, W)."""
    h, w = dims
    yy, xx = np.mgrid[0:h, 0:w]
    theta = np.pi * ((c * 0.37) % 1.0)
    period = 3.0 + (c % 4)
    stripes = 0.5 + 0.5 * np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / period)
    shade = 0.88 + 0.12 * stripes
    return color[:, None, None] * shade[None]


def _background(rng: np.random.Generator, dims: tuple[int, int], noise: float) -> np.ndarray:
    h, w = dims
    base = np.array([0.16, 0.12, 0.12])[:, None, None]
    yy = np.linspace(0.0, 0.06, h)[None, :, None]
    return base + yy + noise * rng.standard_normal((3, h, w))


def _compose(bg: np.ndarray, layers: list[tuple[np.ndarray, np.ndarray]], rng, noise: float) -> np.ndarray:
    img = bg.copy()
    for mask, tex in layers:
        img[:, mask] = tex[:, mask]
    img = img + noise * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _instance_marginals(q: np.ndarray, multi: frozenset, lo: int, hi: int) -> np.ndarray:
    """Exact per-instance class frequencies of the redraw-on-repeat sampler."""
    k = q.size
    counts = np.zeros(k)
    total = 0.0

    def walk(n_left: int, taken: tuple, prob: float) -> None:
        nonlocal total
        if n_left == 0:
            for c in taken:
                counts[c] += prob
            total += prob * len(taken)
            return
        allowed = np.array([(c not in taken) or (c + 1 in multi) for c in range(k)])
        mass = q[allowed].sum()
        if mass <= 0:
            return
        for c in np.flatnonzero(allowed):
            walk(n_left - 1, taken + (int(c),), prob * q[c] / mass)

    for n in range(lo, hi + 1):
        walk(n, (), 1.0 / (hi - lo + 1))
    return counts / total


_WEIGHT_CACHE: dict = {}


def sampling_weights(cfg: SynthConfig) -> np.ndarray:
    """Draw weights that make per-instance class frequencies equal ``class_weights``.

    Redrawing repeated single-instance classes shifts mass toward the other
    classes; a multiplicative fixed-point iteration on exact marginals
    undoes that shift.
    """
    key = (cfg.class_weights, cfg.multi_instance, cfg.instances)
    if key in _WEIGHT_CACHE:
        return _WEIGHT_CACHE[key]
    target = np.asarray(cfg.class_weights)
    multi = frozenset(cfg.multi_instance)
    q = target.copy()
    lo, hi = cfg.instances
    if min(hi, 5) == hi and target.size <= 10:
        for _ in range(200):
            m = _instance_marginals(q, multi, lo, hi)
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = np.where(m > 0, target / m, 1.0)
            q = q * ratio
            q = q / q.sum()
            if np.abs(m - target).max() < 1e-9:
                break
    _WEIGHT_CACHE[key] = q
    return q


def _weighted_classes(cfg: SynthConfig, n: int, rng: np.random.Generator) -> list[int]:
    """Draw ``n`` classes; single-instance classes are redrawn when repeated."""
    weights = sampling_weights(cfg)
    out: list[int] = []
    while len(out) < n:
        c = int(rng.choice(cfg.num_classes, p=weights)) + 1
        if c in out and c not in cfg.multi_instance:
            continue
        out.append(c)
    return out


def gen_frame(cfg: SynthConfig, frame_seed: int, max_tries: int = 300):
    """One still frame: ``(FrameAnnotation, image)`` with disjoint instances.

    The image is float32 of shape ``(3, H, W)`` in ``[0, 1]``.
    """
    rng = _rng(cfg.seed, 0xF0, frame_seed)
    dims = cfg.dims
    scale = min(dims) / 64.0
    lo, hi = cfg.instances
    n = int(rng.integers(lo, hi + 1))
    n_single = sum(1 for c in range(1, cfg.num_classes + 1) if c not in cfg.multi_instance)
    if not cfg.multi_instance and n > n_single:
        raise PlacementFailure(f"{n} instances requested but only {n_single} classes may appear")
    classes = _weighted_classes(cfg, n, rng)
    occupied = np.zeros(dims, dtype=bool)
    instances, layers = [], []
    for c in classes:
        params = _shape_params(c, rng, scale)
        ext = _extent(params)
        for _ in range(max_tries):
            cy = rng.uniform(min(ext, dims[0] / 2), max(dims[0] - ext, dims[0] / 2))
            cx = rng.uniform(min(ext, dims[1] / 2), max(dims[1] - ext, dims[1] / 2))
            mask = _shape_mask(params, cy, cx, dims)
            if mask.sum() >= 4 and not (mask & occupied).any():
                break
        else:
            raise PlacementFailure(f"could not place instance of class {c} after {max_tries} tries")
        occupied |= ndimage.binary_dilation(mask, iterations=1)
        instances.append((c, mask))
        layers.append((mask, _texture(class_color(c, cfg.num_classes), c, dims)))
    img = _compose(_background(rng, dims, cfg.noise), layers, rng, cfg.noise)
    return FrameAnnotation(f"f{frame_seed:06d}", instances, dims=dims), img


def gen_frames(cfg: SynthConfig, n: int, start: int = 0):
    anns, imgs = [], []
    for i in range(start, start + n):
        a, im = gen_frame(cfg, i)
        anns.append(a)
        imgs.append(im)
    return anns, np.stack(imgs)


# videos ----------------------------------------------------------------------


@dataclass
class SynthVideo:
    video: str
    annotations: list  # FrameAnnotation per frame
    images: np.ndarray  # (T, 3, H, W)
    tracks: list  # per frame: track index of each annotated instance
    track_classes: list  # class id per track
    schedule: dict = field(default_factory=dict)  # "c1-c2" -> list[bool] per frame

    @property
    def ambiguous(self) -> list[list[bool]]:
        """Per frame, per annotated instance: was it drawn with the shared pair look."""
        out = []
        for t, tr in enumerate(self.tracks):
            row = []
            for k in tr:
                key = _pair_key(self.track_classes[k], self.schedule)
                row.append(bool(key and self.schedule[key][t]))
            out.append(row)
        return out


def _pair_key(c: int, schedule: dict) -> Optional[str]:
    for key in schedule:
        a, b = (int(x) for x in key.split("-"))
        if c in (a, b):
            return key
    return None


def _schedule(rng: np.random.Generator, length: int, fraction: float, run: float) -> list[bool]:
    if fraction <= 0.0:
        return [False] * length
    if fraction >= 1.0:
        return [True] * length
    # two-state Markov chain with stationary ambiguous share ``fraction``
    p_leave_amb = 1.0 / run
    p_enter_amb = p_leave_amb * fraction / (1.0 - fraction)
    state = bool(rng.random() < fraction)
    out = []
    for _ in range(length):
        out.append(state)
        flip = p_leave_amb if state else min(1.0, p_enter_amb)
        if rng.random() < flip:
            state = not state
    return out


def _track_velocity(c: int, cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    step = cfg.motion_step
    for a, b in cfg.ambiguous_pairs:
        if c == a:
            return np.array([0.0, step * rng.choice([-1, 1])])  # (dy, dx): horizontal
        if c == b:
            return np.array([step * rng.choice([-1, 1]), 0.0])  # vertical
    ang = rng.uniform(0, 2 * np.pi)
    return step * np.array([np.sin(ang), np.cos(ang)])


def render_video_frame(
    classes: list[int],
    params: list[dict],
    centers: np.ndarray,
    ambiguous: list[bool],
    cfg: SynthConfig,
    noise_seed: int,
):
    """Draw one video frame; later tracks occlude earlier ones.

    ``ambiguous[k]`` swaps track k's look for its pair's shared disk. The
    output depends on a track's class only through that look, so swapping
    the labels of an ambiguous pair leaves the pixels unchanged.
    """
    dims = cfg.dims
    rng = _rng(cfg.seed, 0xA1, noise_seed)
    scale = min(dims) / 64.0
    shapes, textures = [], []
    for k, c in enumerate(classes):
        if ambiguous[k]:
            idx = next(i for i, p in enumerate(cfg.ambiguous_pairs) if c in p)
            disk = dict(family="disk", a=6.5 * scale, b=6.5 * scale, angle=0.0)
            shapes.append(_shape_mask(disk, centers[k][0], centers[k][1], dims))
            textures.append(_texture(pair_color(idx), 100 + idx, dims))
        else:
            shapes.append(_shape_mask(params[k], centers[k][0], centers[k][1], dims))
            textures.append(_texture(class_color(c, cfg.num_classes), c, dims))
    masks = []
    for k in range(len(classes)):
        m = shapes[k].copy()
        for j in range(k + 1, len(classes)):
            m &= ~shapes[j]
        masks.append(m)
    img = _compose(_background(rng, dims, cfg.noise), list(zip(masks, textures)), rng, cfg.noise)
    return masks, img


def gen_video(cfg: SynthConfig, video_seed: int) -> SynthVideo:
    rng = _rng(cfg.seed, 0xB2, video_seed)
    dims = cfg.dims
    scale = min(dims) / 64.0
    lo, hi = cfg.video_instances
    n = int(rng.integers(lo, hi + 1))
    # at most one track per ambiguous pair and no repeated classes
    classes: list[int] = []
    weights = np.asarray(cfg.class_weights)
    tries = 0
    while len(classes) < n and tries < 1000:
        tries += 1
        c = int(rng.choice(cfg.num_classes, p=weights)) + 1
        key = next((p for p in cfg.ambiguous_pairs if c in p), None)
        if c in classes or (key and any(x in classes for x in key)):
            continue
        classes.append(c)
    params = [_shape_params(c, rng, scale) for c in classes]
    margin = 8.0 * scale
    pos = np.array([[rng.uniform(margin, dims[0] - margin), rng.uniform(margin, dims[1] - margin)] for _ in classes])
    vel = np.array([_track_velocity(c, cfg, rng) for c in classes]).reshape(len(classes), 2)
    schedule = {
        f"{a}-{b}": _schedule(rng, cfg.video_length, cfg.ambiguity_fraction, cfg.ambiguity_run)
        for a, b in cfg.ambiguous_pairs
    }
    vid = f"v{video_seed:04d}"
    anns, imgs, tracks = [], [], []
    lim = np.array(dims, dtype=np.float64)
    for t in range(cfg.video_length):
        amb = []
        for c in classes:
            key = _pair_key(c, schedule)
            amb.append(bool(key and schedule[key][t]))
        centers = pos + cfg.motion_jitter * rng.standard_normal(pos.shape)
        masks, img = render_video_frame(classes, params, centers, amb, cfg, video_seed * 100003 + t)
        inst, tr = [], []
        for k, (c, m) in enumerate(zip(classes, masks)):
            if m.any():
                inst.append((c, m))
                tr.append(k)
        anns.append(FrameAnnotation(f"{vid}_f{t:04d}", inst, dims=dims))
        imgs.append(img)
        tracks.append(tr)
        # advance and bounce off the margins
        pos = pos + vel
        for k in range(len(classes)):
            for ax in range(2):
                if pos[k, ax] < margin or pos[k, ax] > lim[ax] - margin:
                    vel[k, ax] = -vel[k, ax]
                    pos[k, ax] = np.clip(pos[k, ax], margin, lim[ax] - margin)
    return SynthVideo(vid, anns, np.stack(imgs), tracks, classes, schedule)


# noisy proposals -------------------------------------------------------------


@dataclass
class NoiseConfig:
    n_queries: int = 100
    copies: tuple = (1, 3)
    jitter: float = 1.0  # 0 disables all mask perturbation
    shift: int = 2
    clutter: int = 6
    score_hi: float = 0.92
    score_lo: float = 0.38
    score_sd: float = 0.05
    clutter_drop: float = 0.3  # clutter scores sit this far below the class's true-positive scores
    copy_decay: float = 0.06
    soft_edge: float = 0.15


def _class_score_means(cfg: SynthConfig, noise: NoiseConfig) -> np.ndarray:
    """True-positive score mean per class: frequent classes high, rare ones low."""
    w = np.asarray(cfg.class_weights)
    rank = np.argsort(np.argsort(-w))  # 0 = most frequent
    frac = rank / max(1, cfg.num_classes - 1)
    return noise.score_hi - (noise.score_hi - noise.score_lo) * frac


def _capped_split(total: float, k: int, cap: float, rng) -> np.ndarray:
    """Random split of ``total`` into ``k`` parts, none above ``cap`` (needs k * cap >= total)."""
    share = rng.dirichlet(np.ones(k)) * total
    for _ in range(64):
        over = share > cap
        excess = float((share[over] - cap).sum())
        if excess <= 1e-15:
            break
        share[over] = cap
        free = ~over
        share[free] += excess * share[free] / share[free].sum()
    return np.minimum(share, cap)


def _probs_for(c: int, score: float, num_classes: int, rng, objectness: bool = True) -> np.ndarray:
    """Probability vector with ``score`` on class c; the rest split between no-object and others.

    With ``objectness`` the no-object column stays below ``score`` so the
    proposal's argmax is a real class; without it no-object wins.
    """
    p = np.zeros(num_classes + 1)
    rest = 1.0 - score
    o = [k for k in range(1, num_classes + 1) if k != c]
    p[c] = score
    if objectness:
        # no-object and the other classes all stay strictly below ``score``
        parts = _capped_split(rest, len(o) + 1, 0.98 * score, rng)
        p[0] = parts[0]
        p[o] = parts[1:]
    else:
        p[0] = max(rest * rng.uniform(0.6, 0.9), min(rest, 1.05 * score))
        if o:
            p[o] = _capped_split(rest - p[0], len(o), 0.98 * score, rng)
    p[0] += 1.0 - p.sum()
    return p


def _perturb(mask: np.ndarray, rng: np.random.Generator, noise: NoiseConfig, strength: float) -> np.ndarray:
    if noise.jitter <= 0 or strength <= 0:
        return mask.copy()
    out = mask
    s = int(round(noise.shift * strength))
    if s:
        dy, dx = rng.integers(-s, s + 1, size=2)
        out = np.roll(out, (int(dy), int(dx)), axis=(0, 1))
    op = rng.integers(0, 3)
    it = max(1, int(round(noise.jitter * strength)))
    if op == 1:
        out = ndimage.binary_dilation(out, iterations=it)
    elif op == 2:
        eroded = ndimage.binary_erosion(out, iterations=it)
        out = eroded if eroded.any() else out
    return out


def _soften(mask: np.ndarray, rng: np.random.Generator, edge: float) -> np.ndarray:
    hi = rng.uniform(1.0 - edge, 1.0, size=mask.shape)
    lo = rng.uniform(0.0, edge, size=mask.shape)
    return np.where(mask, hi, lo)


def gen_noisy_proposals(gt: FrameAnnotation, cfg: SynthConfig, noise: NoiseConfig = NoiseConfig(), seed: int = 0) -> ProposalSet:
    """Imitate a trained set predictor's N outputs for one annotated frame.

    Each instance spawns 1-3 copies; the first is the cleanest and scores
    highest. Scores follow the class's frequency rank. Remaining queries are
    low-score clutter blobs or confident no-object proposals. The query
    order is shuffled.
    """
    rng = _rng(cfg.seed, 0xC3, seed, sum(ord(ch) for ch in gt.frame))
    h, w = gt.dims
    C = cfg.num_classes
    means = _class_score_means(cfg, noise)
    probs, masks = [], []
    for c, mask in gt.instances:
        lo, hi = noise.copies
        n_copies = int(rng.integers(lo, hi + 1))
        base = float(np.clip(rng.normal(means[c - 1], noise.score_sd), 0.2, 0.99))
        for j in range(n_copies):
            m = _perturb(mask, rng, noise, 0.0 if j == 0 else float(j))
            s = float(np.clip(base - j * noise.copy_decay * rng.uniform(0.5, 1.5), 0.2, 0.99))
            probs.append(_probs_for(c, s, C, rng))
            masks.append(_soften(m, rng, noise.soft_edge) if noise.jitter > 0 else m.astype(np.float64))
    weights = np.asarray(cfg.class_weights)
    for _ in range(noise.clutter):
        if len(probs) >= noise.n_queries:
            break
        c = int(rng.choice(C, p=weights)) + 1
        s = float(np.clip(rng.normal(means[c - 1] - noise.clutter_drop, noise.score_sd), 0.2, 0.95))
        r = rng.uniform(2.5, 5.0) * min(h, w) / 64.0
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        m = _shape_mask(dict(family="disk", a=r, b=r * rng.uniform(0.6, 1.0), angle=rng.uniform(0, np.pi)), cy, cx, (h, w))
        probs.append(_probs_for(c, s, C, rng))
        masks.append(_soften(m, rng, noise.soft_edge))
    while len(probs) < noise.n_queries:
        c = int(rng.integers(1, C + 1))
        s = float(rng.uniform(0.01, 0.2))
        probs.append(_probs_for(c, s, C, rng, objectness=False))
        masks.append(rng.uniform(0.0, 0.3, size=(h, w)))
    probs, masks = probs[: noise.n_queries], masks[: noise.n_queries]
    order = rng.permutation(len(probs))
    return ProposalSet(gt.frame, np.stack(probs)[order], np.stack(masks)[order])
