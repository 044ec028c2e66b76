"""Synthetic scenes, the height feature, augmentation and point-cloud files.

Scenes are rooms of primitive objects resting on a floor at z = 0. Each
object's ground-truth box is the tight axis-aligned bounds of its own
surface points, so every box holds at least ``min_object_points`` points.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from lgrnet.errors import InvalidArgument, ParseError
from lgrnet.geometry import PointCloud

CLASSES = ("cuboid", "sphere", "cylinder", "cone")
FLOOR_PERCENTILE = 1.0
PC_MAGIC = "LGRPC1"
GT_MAGIC = "LGRGT1"
SCENE_DIR = "scenes"


@dataclass(frozen=True)
class SyntheticSceneSpec:
    extent: tuple = (3.0, 3.0, 1.5)       # meters per axis
    classes: tuple = CLASSES
    min_objects: int = 2
    max_objects: int = 4
    num_points: int = 2048
    object_fraction: float = 0.6         # share of points on objects
    min_object_points: int = 50
    size_range: tuple = (0.3, 0.9)       # object edge lengths, meters
    noise: float = 0.005                 # surface noise sigma, meters
    floor: bool = True
    walls: bool = True
    gap: float = 0.1                     # minimum xy clearance between objects

    def __post_init__(self):
        if len(self.extent) != 3 or min(self.extent) <= 0:
            raise InvalidArgument("extent must be three positive lengths")
        if len(self.classes) < 1 or any(c not in CLASSES for c in self.classes):
            raise InvalidArgument(f"classes must be drawn from {CLASSES}")
        if not 0 <= self.min_objects <= self.max_objects:
            raise InvalidArgument("need 0 <= min_objects <= max_objects")
        lo, hi = self.size_range
        if not 0 < lo <= hi or hi > min(self.extent):
            raise InvalidArgument("size_range must be positive and fit in the extent")
        if self.noise < 0:
            raise InvalidArgument("noise must be non-negative")
        if not 0 < self.object_fraction <= 1:
            raise InvalidArgument("object_fraction must be in (0, 1]")
        if self.max_objects and self.num_points * self.object_fraction < (
                self.max_objects * self.min_object_points):
            raise InvalidArgument("too few points to give every object its minimum")


@dataclass
class Sample:
    pc: PointCloud          # xyz + height
    boxes: np.ndarray       # G x 6: center (3), size (3)
    labels: np.ndarray      # G class indices

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 6)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.boxes) != len(self.labels):
            raise InvalidArgument("boxes and labels disagree in length")


def compute_height(coords):
    """Distance to the floor, estimated as a low percentile of z."""
    z = np.asarray(coords)[:, 2]
    return (z - np.percentile(z, FLOOR_PERCENTILE))[:, None]


def points_in_box(coords, box):
    c, s = box[:3], box[3:]
    return np.all(np.abs(coords - c) <= s / 2, axis=1)


# -- primitive surface samplers (local frame, bottom at z = 0) ----------------

def _cuboid(rng, n, size):
    sx, sy, sz = size
    # five faces, the one on the floor is hidden
    areas = np.array([sx * sy, sx * sz, sx * sz, sy * sz, sy * sz])
    face = rng.choice(5, size=n, p=areas / areas.sum())
    u, v = rng.random(n), rng.random(n)
    p = np.empty((n, 3))
    p[:, 0] = (u - 0.5) * sx
    p[:, 1] = (v - 0.5) * sy
    p[:, 2] = sz
    for f, axis, sign in ((1, 1, -1), (2, 1, 1), (3, 0, -1), (4, 0, 1)):
        m = face == f
        other = 1 - axis
        p[m, axis] = sign * size[axis] / 2
        p[m, other] = (u[m] - 0.5) * size[other]
        p[m, 2] = v[m] * sz
    return p


def _sphere(rng, n, size):
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    p = d * (np.asarray(size) / 2)
    p[:, 2] += size[2] / 2
    return p


def _cylinder(rng, n, size):
    rx, ry, h = size[0] / 2, size[1] / 2, size[2]
    side = rx * ry * 2 * np.pi * h / max(rx, ry)
    top = np.pi * rx * ry
    on_top = rng.random(n) < top / (side + top)
    t = rng.uniform(0, 2 * np.pi, n)
    rad = np.where(on_top, np.sqrt(rng.random(n)), 1.0)
    z = np.where(on_top, h, rng.random(n) * h)
    return np.stack([rx * rad * np.cos(t), ry * rad * np.sin(t), z], axis=1)


def _cone(rng, n, size):
    rx, ry, h = size[0] / 2, size[1] / 2, size[2]
    # lateral area density grows linearly toward the base
    frac = 1.0 - np.sqrt(rng.random(n))
    t = rng.uniform(0, 2 * np.pi, n)
    return np.stack([rx * (1 - frac) * np.cos(t), ry * (1 - frac) * np.sin(t), frac * h], axis=1)


SAMPLERS = {"cuboid": _cuboid, "sphere": _sphere, "cylinder": _cylinder, "cone": _cone}


# Per-class size priors as fractions of the spec's size range: (footprint, height).
# Wide low cuboids, tall thin cylinders, mid spheres and broad tall cones give
# each class a characteristic extent, as real furniture categories have.
SIZE_PRIORS = {
    "cuboid": ((0.55, 1.0), (0.0, 0.45)),
    "sphere": ((0.25, 0.75), None),
    "cylinder": ((0.0, 0.4), (0.55, 1.0)),
    "cone": ((0.45, 1.0), (0.6, 1.0)),
}


def _object_size(rng, cls, lo, hi):
    (f0, f1), h = SIZE_PRIORS[cls]
    span = hi - lo
    if cls == "sphere":
        return np.full(3, lo + span * rng.uniform(f0, f1))
    height = lo + span * rng.uniform(*h)
    if cls in ("cylinder", "cone"):
        d = lo + span * rng.uniform(f0, f1)
        return np.array([d, d, height])
    return np.array([lo + span * rng.uniform(f0, f1), lo + span * rng.uniform(f0, f1), height])


def _place(rng, spec, sizes):
    """Non-overlapping xy placement; objects that do not fit are dropped."""
    ex, ey = spec.extent[:2]
    placed = []
    for i, size in enumerate(sizes):
        hx, hy = size[0] / 2, size[1] / 2
        for _ in range(200):
            c = np.array([rng.uniform(hx, ex - hx), rng.uniform(hy, ey - hy)])
            if all(np.any(np.abs(c - pc) >= (size[:2] + ps[:2]) / 2 + spec.gap)
                   for _, pc, ps in placed):
                placed.append((i, c, size))
                break
    return placed


def _clutter(rng, spec, n):
    ex, ey, ez = spec.extent
    if n == 0:
        return np.zeros((0, 3))
    if not spec.floor and not spec.walls:
        return rng.uniform((0, 0, 0), spec.extent, size=(n, 3))
    parts = []
    n_wall = n // 4 if (spec.walls and spec.floor) else (n if spec.walls else 0)
    n_floor = n - n_wall
    if n_floor:
        parts.append(np.column_stack([rng.uniform(0, ex, n_floor), rng.uniform(0, ey, n_floor),
                                      np.zeros(n_floor)]))
    if n_wall:
        # back walls along x = 0 and y = 0, split by length
        on_x = rng.random(n_wall) < ey / (ex + ey)
        u = rng.random(n_wall)
        z = rng.uniform(0, ez, n_wall)
        parts.append(np.column_stack([np.where(on_x, 0.0, u * ex),
                                      np.where(on_x, u * ey, 0.0), z]))
    return np.concatenate(parts)


def generate_scene(spec, seed):
    """Build one synthetic room; fully determined by ``(spec, seed)``."""
    rng = np.random.default_rng(seed)
    n_obj = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    classes = rng.integers(0, len(spec.classes), n_obj)
    lo, hi = spec.size_range
    sizes = [_object_size(rng, spec.classes[c], lo, hi) for c in classes]
    placed = _place(rng, spec, sizes)

    n_total = spec.num_points
    per_obj = int(n_total * spec.object_fraction) // len(placed) if placed else 0
    pts, boxes = [], []
    for i, cxy, size in placed:
        local = SAMPLERS[spec.classes[classes[i]]](rng, per_obj, size)
        p = local + np.array([cxy[0], cxy[1], 0.0]) + rng.normal(0, spec.noise, (per_obj, 3))
        lo_b, hi_b = p.min(axis=0), p.max(axis=0)
        boxes.append(np.concatenate([(lo_b + hi_b) / 2, hi_b - lo_b]))
        pts.append(p)
    n_clutter = n_total - per_obj * len(placed)
    clutter = _clutter(rng, spec, n_clutter)
    clutter += rng.normal(0, spec.noise, clutter.shape)
    pts.append(clutter)
    coords = np.concatenate(pts)
    coords = coords[rng.permutation(len(coords))]
    # class indices refer to the global vocabulary
    labels = np.array([CLASSES.index(spec.classes[classes[i]]) for i, _, _ in placed],
                      dtype=np.int64)
    return Sample(PointCloud(coords, compute_height(coords)),
                  np.array(boxes).reshape(-1, 6), labels)


def validate_sample(sample, min_object_points=50):
    """Raise InvalidArgument when a sample breaks the scene invariants."""
    pc = sample.pc
    if pc.c != 1:
        raise InvalidArgument(f"expected a single height channel, got {pc.c}")
    if not np.all(np.isfinite(pc.feats)):
        raise InvalidArgument("non-finite height feature")
    if np.any(sample.boxes[:, 3:] <= 0):
        raise InvalidArgument("box sizes must be positive")
    if np.any(sample.labels < 0) or np.any(sample.labels >= len(CLASSES)):
        raise InvalidArgument("label out of range")
    for i, box in enumerate(sample.boxes):
        n = int(points_in_box(pc.coords, box).sum())
        if n < min_object_points:
            raise InvalidArgument(f"box {i} holds {n} points, fewer than {min_object_points}")


# -- augmentation ---------------------------------------------------------------

@dataclass(frozen=True)
class AugmentParams:
    flip_x: bool = False
    flip_y: bool = False
    angle: float = 0.0      # radians about the up axis
    scale: float = 1.0


def draw_augment_params(rng, max_angle_deg=5.0, scale_range=(0.9, 1.1)):
    flip_x, flip_y = rng.random() < 0.5, rng.random() < 0.5
    angle = np.deg2rad(rng.uniform(-max_angle_deg, max_angle_deg))
    return AugmentParams(bool(flip_x), bool(flip_y), float(angle), float(rng.uniform(*scale_range)))


def _transform_matrix(p):
    f = np.diag([-1.0 if p.flip_x else 1.0, -1.0 if p.flip_y else 1.0, 1.0])
    c, s = np.cos(p.angle), np.sin(p.angle)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return p.scale * rot @ f


def _box_corners(boxes):
    signs = np.array([[x, y, z] for x in (-0.5, 0.5) for y in (-0.5, 0.5) for z in (-0.5, 0.5)])
    return boxes[:, None, :3] + signs[None] * boxes[:, None, 3:]


def augment(sample, seed=None, params=None):
    """Flip x/y, rotate about z and scale points and boxes consistently.

    Boxes stay axis-aligned: each is replaced by the bounds of its
    transformed corners. The height feature is recomputed afterwards.
    """
    if params is None:
        params = draw_augment_params(np.random.default_rng(seed))
    m = _transform_matrix(params)
    coords = sample.pc.coords @ m.T
    boxes = sample.boxes.copy()
    if len(boxes):
        corners = _box_corners(sample.boxes) @ m.T
        lo, hi = corners.min(axis=1), corners.max(axis=1)
        boxes = np.concatenate([(lo + hi) / 2, hi - lo], axis=1)
    return Sample(PointCloud(coords, compute_height(coords)), boxes, sample.labels.copy())


# -- files ----------------------------------------------------------------------

def _read_lines(path):
    try:
        return Path(path).read_text().splitlines()
    except OSError as e:
        raise ParseError(f"cannot read: {e.strerror}", path=path) from None


def _floats(tokens, path, lineno, width):
    if len(tokens) != width:
        raise ParseError(f"expected {width} values, found {len(tokens)}", path, lineno)
    try:
        vals = [float(t) for t in tokens]
    except ValueError:
        raise ParseError("non-numeric value", path, lineno) from None
    if not all(np.isfinite(vals)):
        raise ParseError("non-finite value", path, lineno)
    return vals


def save_points(path, pc):
    """Write an ``LGRPC1`` file; values carry 9 significant digits."""
    pc = pc.pc if isinstance(pc, Sample) else pc
    data = np.concatenate([pc.coords, pc.feats], axis=1)
    with open(path, "w") as fh:
        fh.write(f"{PC_MAGIC} {pc.n} {pc.c}\n")
        np.savetxt(fh, data, fmt="%.9g")


def load_points(path):
    lines = _read_lines(path)
    if not lines:
        raise ParseError("empty file", path, 1)
    head = lines[0].split()
    if len(head) != 3 or head[0] != PC_MAGIC:
        raise ParseError(f"header must be '{PC_MAGIC} N C'", path, 1)
    try:
        n, c = int(head[1]), int(head[2])
    except ValueError:
        raise ParseError("header counts must be integers", path, 1) from None
    if n < 1 or c < 0:
        raise ParseError("header counts out of range", path, 1)
    body = [(i + 2, ln) for i, ln in enumerate(lines[1:]) if ln.strip()]
    if len(body) != n:
        raise ParseError(f"header declares {n} points but the body has {len(body)}",
                         path, len(lines))
    data = np.array([_floats(ln.split(), path, no, 3 + c) for no, ln in body])
    return PointCloud(data[:, :3], data[:, 3:])


def save_gt(path, boxes, labels):
    with open(path, "w") as fh:
        fh.write(GT_MAGIC + "\n")
        for box, lab in zip(np.asarray(boxes).reshape(-1, 6), labels):
            fh.write(" ".join(f"{v:.9g}" for v in box) + f" {int(lab)}\n")


def load_gt(path):
    lines = _read_lines(path)
    if not lines or lines[0].strip() != GT_MAGIC:
        raise ParseError(f"header must be '{GT_MAGIC}'", path, 1)
    boxes, labels = [], []
    for i, ln in enumerate(lines[1:], start=2):
        tok = ln.split()
        if not tok:
            continue
        if len(tok) != 7:
            raise ParseError(f"expected 7 values, found {len(tok)}", path, i)
        vals = _floats(tok[:6], path, i, 6)
        try:
            lab = int(tok[6])
        except ValueError:
            raise ParseError("label must be an integer", path, i) from None
        if min(vals[3:]) <= 0:
            raise ParseError("box sizes must be positive", path, i)
        boxes.append(vals)
        labels.append(lab)
    return np.array(boxes).reshape(-1, 6), np.array(labels, dtype=np.int64)


def save_sample(stem, sample):
    """Write ``stem.lgrpc`` and ``stem.lgrgt``."""
    stem = Path(stem)
    save_points(stem.with_suffix(".lgrpc"), sample.pc)
    save_gt(stem.with_suffix(".lgrgt"), sample.boxes, sample.labels)


def load_sample(stem):
    stem = Path(stem)
    pc = load_points(stem.with_suffix(".lgrpc"))
    gt = stem.with_suffix(".lgrgt")
    boxes, labels = load_gt(gt) if gt.exists() else (np.zeros((0, 6)), np.zeros(0, np.int64))
    return Sample(pc, boxes, labels)


def write_dataset(root, samples, train_ids, val_ids):
    """Lay out ``scenes/XXXX.lgrpc|lgrgt`` plus ``train.txt`` / ``val.txt``."""
    root = Path(root)
    (root / SCENE_DIR).mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        save_sample(root / SCENE_DIR / f"{i:04d}", s)
    for name, ids in (("train.txt", train_ids), ("val.txt", val_ids)):
        (root / name).write_text("".join(f"{i:04d}\n" for i in ids))


def read_manifest(root, split):
    path = Path(root) / f"{split}.txt"
    lines = _read_lines(path)
    ids = [ln.strip() for ln in lines if ln.strip()]
    for i, sid in enumerate(ids):
        if not (Path(root) / SCENE_DIR / f"{sid}.lgrpc").exists():
            raise ParseError(f"scene {sid!r} listed but missing", path, i + 1)
    return ids


def load_split(root, split):
    return [load_sample(Path(root) / SCENE_DIR / sid) for sid in read_manifest(root, split)]
