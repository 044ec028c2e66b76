"""Flat ``key = value`` run configuration.

Every key, its type and its default live in :data:`SCHEMA`; unknown keys
are rejected so that a typo in an ablation config fails loudly. Lines
starting with ``#`` are comments. Lists are comma separated.
"""

from dataclasses import dataclass
from pathlib import Path

from lgrnet.backbone import BackboneConfig, SPConfig
from lgrnet.dataio import CLASSES, SyntheticSceneSpec
from lgrnet.detect import DetectorConfig, HeadConfig, LossConfig
from lgrnet.errors import ConfigError, InvalidArgument
from lgrnet.geometry import QUERY_KINDS, RegionSpec
from lgrnet.lgr import AGGREGATIONS, GridSpec


@dataclass(frozen=True)
class Key:
    kind: str          # int, float, bool, str, ints, floats, strs
    default: object
    doc: str
    choices: tuple = ()


def _stage_keys(i, n, e, k, c1, c2):
    return {
        f"sp{i}.num_regions": Key("int", n, f"SP{i} centroids N'"),
        f"sp{i}.half_edge": Key("float", e, f"SP{i} cube half-edge E (m)"),
        f"sp{i}.neighbors": Key("int", k, f"SP{i} points per region K"),
        f"sp{i}.conv1": Key("int", c1, f"SP{i} first conv width"),
        f"sp{i}.conv2": Key("int", c2, f"SP{i} second conv width (stage output)"),
    }


SCHEMA = {
    "seed": Key("int", 0, "master seed: init, shuffling, augmentation, sampling"),
    **_stage_keys(1, 2048, 0.15, 64, 64, 128),
    **_stage_keys(2, 1024, 0.3, 32, 128, 256),
    **_stage_keys(3, 512, 0.6, 16, 128, 256),
    **_stage_keys(4, 256, 1.0, 16, 128, 256),
    "sp.kernel_size": Key("int", 3, "mini-CNN kernel edge (3 or 1)"),
    "query.kind": Key("str", "cube", "neighborhood query", QUERY_KINDS),
    "grid.resolution": Key("ints", (5, 5, 5), "voxels per axis W,H,L (one value = cubic)"),
    "grid.radius_scale": Key("float", 1.0, "kernel radius as a multiple of the half cell diagonal"),
    "grid.power": Key("float", 1.0, "kernel falloff exponent p"),
    "grid.aggregation": Key("str", "interpolation", "voxel aggregation", tuple(AGGREGATIONS)),
    "fp.widths": Key("ints", (256, 256), "feature propagation MLP widths"),
    "head.num_classes": Key("int", len(CLASSES), "object classes"),
    "head.num_proposals": Key("int", 64, "vote clusters per scene"),
    "head.group_radius": Key("float", 0.3, "vote grouping radius (m)"),
    "head.group_neighbors": Key("int", 16, "votes per cluster"),
    "head.proposal_widths": Key("ints", (128, 128), "cluster MLP widths"),
    "head.hidden": Key("int", 128, "proposal head hidden width"),
    "head.base_size": Key("float", 0.6, "reference box edge for log-size regression (m)"),
    "head.nms_iou": Key("float", 0.25, "NMS IoU threshold"),
    "loss.pos_dist": Key("float", 0.3, "cluster-to-center distance for positives (m)"),
    "loss.neg_dist": Key("float", 0.6, "cluster-to-center distance beyond which negative (m)"),
    "loss.vote_weight": Key("float", 1.0, "vote regression weight"),
    "loss.objectness_weight": Key("float", 0.5, "objectness weight"),
    "loss.box_weight": Key("float", 1.0, "center + size weight"),
    "loss.class_weight": Key("float", 0.1, "classification weight"),
    "loss.huber_beta": Key("float", 0.1, "smooth-L1 transition point"),
    "loss.neg_objectness_weight": Key("float", 0.2, "relative weight of negative proposals"),
    "train.lr": Key("float", 0.001, "Adam learning rate"),
    "train.batch_size": Key("int", 8, "scenes per step"),
    "train.epochs": Key("int", 180, "training epochs"),
    "train.max_steps": Key("int", 0, "stop after this many steps (0 = no limit)"),
    "train.decay_epochs": Key("ints", (80, 120), "epochs at which the learning rate drops"),
    "train.decay_factor": Key("float", 0.1, "learning rate multiplier at each drop"),
    "train.augment": Key("bool", True, "flip / rotate / scale training scenes"),
    "train.bn_momentum": Key("float", 0.9, "batch-norm running-stat momentum"),
    "train.checkpoint_every": Key("int", 0, "also save every N epochs (0 = final only)"),
    "eval.batch_size": Key("int", 8, "scenes per inference batch"),
}

SCENE_SCHEMA = {
    "scene.extent": Key("floats", (3.0, 3.0, 1.5), "room size per axis (m)"),
    "scene.classes": Key("strs", CLASSES, "object classes"),
    "scene.min_objects": Key("int", 2, "fewest objects per scene"),
    "scene.max_objects": Key("int", 4, "most objects per scene"),
    "scene.num_points": Key("int", 2048, "points per scene"),
    "scene.object_fraction": Key("float", 0.6, "share of points on objects"),
    "scene.min_object_points": Key("int", 50, "minimum points per object"),
    "scene.size_range": Key("floats", (0.3, 0.9), "object edge range (m)"),
    "scene.noise": Key("float", 0.005, "surface noise sigma (m)"),
    "scene.floor": Key("bool", True, "sample a floor plane"),
    "scene.walls": Key("bool", True, "sample two back walls"),
    "scene.gap": Key("float", 0.1, "minimum clearance between objects (m)"),
    "split.val_fraction": Key("float", 0.2, "share of generated scenes in val.txt"),
}

_BOOLS = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


def _convert(key, spec, raw, where):
    def fail(msg):
        raise ConfigError(f"{where}: {key}: {msg}")

    parts = [p.strip() for p in raw.split(",")]
    try:
        if spec.kind == "int":
            value = int(raw)
        elif spec.kind == "float":
            value = float(raw)
        elif spec.kind == "bool":
            if raw.lower() not in _BOOLS:
                fail(f"expected true/false, got {raw!r}")
            value = _BOOLS[raw.lower()]
        elif spec.kind == "str":
            value = raw
        elif spec.kind == "ints":
            value = tuple(int(p) for p in parts)
        elif spec.kind == "floats":
            value = tuple(float(p) for p in parts)
        else:
            value = tuple(p for p in parts if p)
    except ValueError:
        fail(f"cannot read {raw!r} as {spec.kind}")
    if spec.choices and value not in spec.choices:
        fail(f"{value!r} is not one of {list(spec.choices)}")
    return value


def parse_text(text, schema, source="<config>"):
    """Parse ``key = value`` lines against ``schema``; returns a full dict."""
    values = {k: v.default for k, v in schema.items()}
    seen = {}
    for no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{source}:{no}"
        if "=" not in line:
            raise ConfigError(f"{where}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in schema:
            raise ConfigError(f"{where}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"{where}: {key!r} already set on line {seen[key]}")
        seen[key] = no
        values[key] = _convert(key, schema[key], raw, where)
    return values


def apply_overrides(values, items, schema, source="--set"):
    """Copy of ``values`` with ``key=value`` strings applied on top."""
    out = dict(values)
    for item in items:
        if "=" not in item:
            raise ConfigError(f"{source}: expected key=value, got {item!r}")
        key, raw = (s.strip() for s in item.split("=", 1))
        if key not in schema:
            raise ConfigError(f"{source}: unknown key {key!r}")
        out[key] = _convert(key, schema[key], raw, source)
    return out


def read_file(path, schema):
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"{path}: cannot read config: {e.strerror}") from None
    return parse_text(text, schema, str(path))


def render_text(values, schema):
    """Canonical text for a value dict, with each key's documentation."""
    lines = []
    for key, spec in schema.items():
        v = values[key]
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"# {spec.doc}")
        lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"


class RunConfig:
    """Typed view over a parsed run configuration."""

    def __init__(self, values=None):
        full = {k: v.default for k, v in SCHEMA.items()}
        for k, v in (values or {}).items():
            if k not in SCHEMA:
                raise ConfigError(f"unknown key {k!r}")
            full[k] = v
        self.values = full
        try:
            self.detector = self._detector()
            self.loss = self._loss()
        except InvalidArgument as e:
            raise ConfigError(str(e)) from None
        self._check()

    @classmethod
    def from_file(cls, path):
        return cls(read_file(path, SCHEMA))

    @classmethod
    def from_text(cls, text):
        return cls(parse_text(text, SCHEMA))

    def __getitem__(self, key):
        return self.values[key]

    def with_overrides(self, items):
        """Copy with ``key=value`` strings applied (as given to ``--set``)."""
        return RunConfig(apply_overrides(self.values, items, SCHEMA))

    def replace(self, **overrides):
        """Copy with dotted keys given as ``section__name=value``."""
        vals = dict(self.values)
        for k, v in overrides.items():
            vals[k.replace("__", ".")] = v
        return RunConfig(vals)

    def to_text(self):
        return render_text(self.values, SCHEMA)

    def _check(self):
        v = self.values
        if v["train.batch_size"] < 1 or v["eval.batch_size"] < 1:
            raise ConfigError("batch sizes must be positive")
        if v["train.lr"] <= 0 or v["train.epochs"] < 1:
            raise ConfigError("train.lr and train.epochs must be positive")
        if self.detector.head.num_proposals > self.detector.backbone.num_seeds:
            raise ConfigError("head.num_proposals exceeds the number of seeds (sp2.num_regions)")

    def _grid(self):
        res = self["grid.resolution"]
        res = tuple(res) * 3 if len(res) == 1 else tuple(res)
        return GridSpec(resolution=res, radius_scale=self["grid.radius_scale"],
                        power=self["grid.power"], aggregation=self["grid.aggregation"])

    def _detector(self):
        grid = self._grid()
        stages = tuple(
            SPConfig(RegionSpec(self[f"sp{i}.num_regions"], self[f"sp{i}.half_edge"],
                                self[f"sp{i}.neighbors"], self["query.kind"]),
                     grid=grid, conv_channels=(self[f"sp{i}.conv1"], self[f"sp{i}.conv2"]),
                     kernel_size=self["sp.kernel_size"])
            for i in range(1, 5))
        backbone = BackboneConfig(stages=stages, fp_widths=tuple(self["fp.widths"]))
        head = HeadConfig(
            num_classes=self["head.num_classes"], num_proposals=self["head.num_proposals"],
            group_radius=self["head.group_radius"], group_neighbors=self["head.group_neighbors"],
            proposal_widths=tuple(self["head.proposal_widths"]), head_hidden=self["head.hidden"],
            base_size=self["head.base_size"], nms_iou=self["head.nms_iou"])
        return DetectorConfig(backbone=backbone, head=head)

    def _loss(self):
        return LossConfig(
            pos_dist=self["loss.pos_dist"], neg_dist=self["loss.neg_dist"],
            vote_weight=self["loss.vote_weight"],
            objectness_weight=self["loss.objectness_weight"],
            box_weight=self["loss.box_weight"], class_weight=self["loss.class_weight"],
            huber_beta=self["loss.huber_beta"],
            neg_objectness_weight=self["loss.neg_objectness_weight"])


def scene_spec_from_values(values):
    try:
        return SyntheticSceneSpec(
            extent=tuple(values["scene.extent"]), classes=tuple(values["scene.classes"]),
            min_objects=values["scene.min_objects"], max_objects=values["scene.max_objects"],
            num_points=values["scene.num_points"],
            object_fraction=values["scene.object_fraction"],
            min_object_points=values["scene.min_object_points"],
            size_range=tuple(values["scene.size_range"]), noise=values["scene.noise"],
            floor=values["scene.floor"], walls=values["scene.walls"], gap=values["scene.gap"])
    except (InvalidArgument, TypeError, ValueError) as e:
        raise ConfigError(f"invalid scene spec: {e}") from None


def read_scene_spec(path):
    """Returns ``(SyntheticSceneSpec, val_fraction)``."""
    values = read_file(path, SCENE_SCHEMA)
    frac = values["split.val_fraction"]
    if not 0 <= frac < 1:
        raise ConfigError(f"{path}: split.val_fraction must be in [0, 1)")
    return scene_spec_from_values(values), frac
