"""Vote-based detection head, axis-aligned box metrics and the training loss.

Boxes are rows ``(cx, cy, cz, sx, sy, sz)`` in meters. Seeds vote for object
centers through a shared MLP; proposals cluster the votes with FPS plus ball
grouping and decode objectness, class scores, a center offset and log-size.
"""

from dataclasses import dataclass, field

import numpy as np

from lgrnet import geometry
from lgrnet.backbone import BackboneConfig, LGRNet
from lgrnet.errors import InvalidArgument
from lgrnet.geometry import PointCloud
from lgrnet.nncore import Linear, Module, SharedMLP, Tensor, concat, gather_rows
from lgrnet.nncore import functional as F


@dataclass(frozen=True)
class HeadConfig:
    num_classes: int = 4
    num_proposals: int = 64
    group_radius: float = 0.3
    group_neighbors: int = 16
    proposal_widths: tuple = (128, 128)
    head_hidden: int = 128
    base_size: float = 0.6          # meters; sizes are regressed as log(size / base)
    nms_iou: float = 0.25

    def __post_init__(self):
        if self.num_classes < 1 or self.num_proposals < 1 or self.group_neighbors < 1:
            raise InvalidArgument("class, proposal and neighbor counts must be positive")
        if not self.group_radius > 0 or not self.base_size > 0:
            raise InvalidArgument("group_radius and base_size must be positive")


@dataclass(frozen=True)
class LossConfig:
    pos_dist: float = 0.3
    neg_dist: float = 0.6
    vote_weight: float = 1.0
    objectness_weight: float = 0.5
    box_weight: float = 1.0
    class_weight: float = 0.1
    huber_beta: float = 0.1
    neg_objectness_weight: float = 0.2    # VoteNet-style down-weighting of negatives


@dataclass(frozen=True)
class DetectorConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    head: HeadConfig = field(default_factory=HeadConfig)


@dataclass
class VoteSet:
    coords: Tensor          # B x S x 3, seed coordinates + predicted offset
    feats: Tensor           # B x S x F
    offsets: Tensor         # B x S x 3


@dataclass
class ProposalSet:
    """Raw head outputs for a batch; ``decode`` turns them into boxes."""
    cluster_centers: np.ndarray   # B x P x 3
    cluster_idx: np.ndarray       # B x P indices of the votes picked as centers
    member_idx: np.ndarray        # B x P x K vote indices per cluster
    objectness_logits: Tensor     # B x P x 2
    class_logits: Tensor          # B x P x num_classes
    center_offsets: Tensor        # B x P x 3
    log_sizes: Tensor             # B x P x 3, log(size / base)
    base_size: float
    center_base: Tensor = None    # differentiable view of cluster_centers

    def predicted_centers(self):
        base = self.center_base if self.center_base is not None else Tensor(
            self.cluster_centers.astype(self.center_offsets.dtype))
        return base + self.center_offsets

    @property
    def centers(self):
        return self.cluster_centers + self.center_offsets.data

    @property
    def sizes(self):
        return self.base_size * np.exp(self.log_sizes.data)


@dataclass
class Detections:
    """Scored axis-aligned boxes of one scene."""
    boxes: np.ndarray        # D x 6
    scores: np.ndarray       # D
    labels: np.ndarray       # D
    objectness: np.ndarray = None
    class_probs: np.ndarray = None
    source: np.ndarray = None     # proposal index of each detection

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 6)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if not len(self.boxes) == len(self.scores) == len(self.labels):
            raise InvalidArgument("boxes, scores and labels disagree in length")
        if np.any(self.boxes[:, 3:] <= 0):
            raise InvalidArgument("box sizes must be positive")

    def __len__(self):
        return len(self.scores)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        pick = (lambda a: None if a is None else a[idx])
        return Detections(self.boxes[idx], self.scores[idx], self.labels[idx],
                          pick(self.objectness), pick(self.class_probs), pick(self.source))


# -- voting and proposals ------------------------------------------------------

class VotingModule(Module):
    """Shared MLP F -> F -> 3 + F: a center offset and a feature residual per seed."""

    def __init__(self, channels, rng=None, dtype=np.float32, momentum=0.9, zero_init=False):
        super().__init__()
        self.hidden = SharedMLP((channels, channels), rng=rng, dtype=dtype, momentum=momentum)
        self.out = Linear(channels, 3 + channels, rng=rng, dtype=dtype, zero=zero_init)

    def forward(self, seed_coords, seed_feats):
        h = self.out(self.hidden(seed_feats))
        offsets = h[..., :3]
        feats = seed_feats + h[..., 3:]
        return VoteSet(coords=offsets + Tensor(seed_coords.astype(offsets.dtype)),
                       feats=feats, offsets=offsets)


def vote(module, seeds):
    """Apply a :class:`VotingModule` to a :class:`~lgrnet.backbone.SeedSet`."""
    return module(seeds.coords, seeds.feats)


class ProposalModule(Module):
    def __init__(self, cfg, in_channels, rng=None, dtype=np.float32, momentum=0.9):
        super().__init__()
        self.cfg = cfg
        widths = (3 + in_channels,) + tuple(cfg.proposal_widths)
        self.group_mlp = SharedMLP(widths, rng=rng, dtype=dtype, momentum=momentum)
        self.head_hidden = SharedMLP((widths[-1], cfg.head_hidden), rng=rng, dtype=dtype,
                                     momentum=momentum)
        self.head_out = Linear(cfg.head_hidden, 2 + cfg.num_classes + 6, rng=rng, dtype=dtype)

    def group(self, vote_coords, seeds):
        """FPS cluster centers and ball-grouped members for every scene."""
        cfg = self.cfg
        b, s = vote_coords.shape[:2]
        if cfg.num_proposals > s:
            raise InvalidArgument(f"cannot draw {cfg.num_proposals} proposals from {s} votes")
        centers, members = [], []
        for i in range(b):
            pc = PointCloud(vote_coords[i], np.zeros((s, 1)))
            c = geometry.farthest_point_sample(pc, cfg.num_proposals, seed=seeds[i])
            reg = geometry.radius_query(pc, pc.coords[c], cfg.group_radius,
                                        cfg.group_neighbors, seed=seeds[i])
            centers.append(c)
            members.append(reg.member_idx)
        return np.stack(centers), np.stack(members)

    def forward(self, votes, seeds):
        cfg = self.cfg
        vc = votes.coords.data.astype(np.float64)
        cidx, members = self.group(vc, seeds)
        centers = np.take_along_axis(vc, cidx[..., None], axis=1)
        center_t = gather_rows(votes.coords, cidx)
        b, p = cidx.shape
        rel = (gather_rows(votes.coords, members)
               - center_t.reshape(b, p, 1, 3)) * (1.0 / cfg.group_radius)
        grouped = concat([rel, gather_rows(votes.feats, members)], axis=-1)
        pooled = F.max_along(self.group_mlp(grouped), axis=2)
        out = self.head_out(self.head_hidden(pooled))
        nc = cfg.num_classes
        return ProposalSet(
            cluster_centers=centers, cluster_idx=cidx, member_idx=members,
            objectness_logits=out[..., :2], class_logits=out[..., 2:2 + nc],
            center_offsets=out[..., 2 + nc:5 + nc], log_sizes=out[..., 5 + nc:8 + nc],
            base_size=cfg.base_size, center_base=center_t)


def propose(module, votes, seeds):
    return module(votes, seeds)


class Detector(Module):
    """LGR-Net backbone, voting module and proposal module."""

    def __init__(self, cfg=None, rng=None, dtype=np.float32, momentum=0.9):
        super().__init__()
        cfg = cfg if cfg is not None else DetectorConfig()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        self.backbone = LGRNet(cfg.backbone, rng=rng, dtype=dtype, momentum=momentum)
        f = cfg.backbone.seed_channels
        self.voting = VotingModule(f, rng=rng, dtype=dtype, momentum=momentum, zero_init=True)
        self.proposal = ProposalModule(cfg.head, f, rng=rng, dtype=dtype, momentum=momentum)

    def forward(self, coords, feats, seeds):
        seed_set = self.backbone(coords, feats, seeds)
        votes = vote(self.voting, seed_set)
        props = propose(self.proposal, votes, [s * 16 + 15 for s in seeds])
        return seed_set, votes, props


# -- boxes and metrics -----------------------------------------------------------

def _bounds(boxes):
    boxes = np.asarray(boxes, dtype=np.float64)
    return boxes[..., :3] - boxes[..., 3:] / 2, boxes[..., :3] + boxes[..., 3:] / 2


def iou3d_axis_aligned(a, b):
    """Intersection over union of two axis-aligned boxes."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if np.any(a[3:] <= 0) or np.any(b[3:] <= 0):
        raise InvalidArgument("box sizes must be positive")
    return float(iou_matrix(a[None], b[None])[0, 0])


def iou_matrix(a, b):
    """Pairwise IoU between box sets A (n x 6) and B (m x 6)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 6)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 6)
    alo, ahi = _bounds(a)
    blo, bhi = _bounds(b)
    inter = np.clip(np.minimum(ahi[:, None], bhi[None]) - np.maximum(alo[:, None], blo[None]),
                    0.0, None).prod(axis=-1)
    # volumes from the same bounds as the overlap, so IoU(a, a) is exactly 1
    va, vb = (ahi - alo).prod(axis=1), (bhi - blo).prod(axis=1)
    union = va[:, None] + vb[None] - inter
    return np.clip(inter / union, 0.0, 1.0)


def nms3d(dets, iou_thresh=0.25):
    """Greedy per-class suppression in descending score order.

    A box is dropped when its IoU with a kept box of the same class exceeds
    ``iou_thresh``. Equal scores keep the lower proposal index first.
    """
    if len(dets) == 0:
        return dets.subset([])
    order = np.argsort(-dets.scores, kind="stable")
    iou = iou_matrix(dets.boxes, dets.boxes)
    kept = []
    for i in order:
        if all(dets.labels[j] != dets.labels[i] or iou[i, j] <= iou_thresh for j in kept):
            kept.append(i)
    return dets.subset(kept)


def decode(props, nms_iou=0.25, apply_nms=True):
    """Per-scene :class:`Detections` from a :class:`ProposalSet`.

    Each proposal is labeled with its most likely class and scored by
    objectness times that class probability.
    """
    obj = F.softmax(props.objectness_logits.data, axis=-1)[..., 1]
    cls = F.softmax(props.class_logits.data, axis=-1)
    centers, sizes = props.centers, props.sizes
    out = []
    for i in range(obj.shape[0]):
        labels = np.argmax(cls[i], axis=-1)
        score = obj[i] * cls[i][np.arange(len(labels)), labels]
        d = Detections(np.concatenate([centers[i], sizes[i]], axis=1), score, labels,
                       objectness=obj[i], class_probs=cls[i], source=np.arange(len(labels)))
        out.append(nms3d(d, nms_iou) if apply_nms else d)
    return out


def _match(dets, gts, iou_thresh, cls):
    """TP flags and scores for class ``cls`` over all scenes, in score order."""
    records = []
    for si, d in enumerate(dets):
        for j in np.nonzero(d.labels == cls)[0]:
            records.append((-d.scores[j], si, j))
    records.sort()
    matched = [np.zeros(int((g[1] == cls).sum()), dtype=bool) for g in gts]
    gt_boxes = [g[0][g[1] == cls] for g in gts]
    scores, tp = [], []
    for neg_score, si, j in records:
        ok = False
        if len(gt_boxes[si]):
            ious = iou_matrix(dets[si].boxes[j], gt_boxes[si])[0]
            ious[matched[si]] = -1.0
            k = int(np.argmax(ious))
            if ious[k] >= iou_thresh:
                matched[si][k] = True
                ok = True
        scores.append(-neg_score)
        tp.append(ok)
    return np.array(scores), np.array(tp, dtype=bool)


def ap_from_tp(tp, n_gt):
    """All-point interpolated area under the precision-recall curve."""
    if n_gt == 0:
        return float("nan")
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def average_precision(dets, gts, iou_thresh, num_classes):
    """Per-class AP and mAP.

    ``dets`` is a list of :class:`Detections`; ``gts`` a matching list of
    ``(boxes G x 6, labels G)``. Classes without ground truth are excluded
    from the mean (their AP is reported as None).
    """
    if len(dets) != len(gts):
        raise InvalidArgument("need one detection set per ground-truth scene")
    gts = [(np.asarray(b, dtype=np.float64).reshape(-1, 6), np.asarray(l).reshape(-1))
           for b, l in gts]
    per_class = {}
    for c in range(num_classes):
        n_gt = int(sum((g[1] == c).sum() for g in gts))
        if n_gt == 0:
            per_class[c] = None
            continue
        _, tp = _match(dets, gts, iou_thresh, c)
        per_class[c] = ap_from_tp(tp, n_gt)
    valid = [v for v in per_class.values() if v is not None]
    return per_class, (float(np.mean(valid)) if valid else float("nan"))


# -- loss ----------------------------------------------------------------------------

def _inside_any(coords, boxes):
    lo, hi = _bounds(boxes)
    return np.all((coords[:, None] >= lo[None]) & (coords[:, None] <= hi[None]), axis=-1)


def vote_targets(seed_coords, boxes):
    """Mask of seeds inside a gt box, and the nearest containing box center."""
    s = seed_coords.shape[0]
    if len(boxes) == 0:
        return np.zeros(s, dtype=bool), np.zeros((s, 3))
    inside = _inside_any(seed_coords, boxes)
    d = np.linalg.norm(seed_coords[:, None] - boxes[None, :, :3], axis=-1)
    d = np.where(inside, d, np.inf)
    nearest = np.argmin(d, axis=1)
    return inside.any(axis=1), boxes[nearest, :3]


def proposal_targets(cluster_centers, boxes, labels, cfg):
    """Objectness labels (1 / 0 / -1 ignored) and the assigned gt per proposal."""
    p = cluster_centers.shape[0]
    if len(boxes) == 0:
        return np.zeros(p, dtype=np.int64), np.zeros(p, dtype=np.int64)
    d = np.linalg.norm(cluster_centers[:, None] - boxes[None, :, :3], axis=-1)
    nearest = np.argmin(d, axis=1)
    dmin = d[np.arange(p), nearest]
    obj = np.full(p, -1, dtype=np.int64)
    obj[dmin < cfg.pos_dist] = 1
    obj[dmin > cfg.neg_dist] = 0
    return obj, nearest


def detection_loss(props, votes, seeds, gts, cfg=None):
    """Weighted sum of vote, objectness, box and class losses.

    ``gts`` is a list of ``(boxes, labels)`` per scene. Returns
    ``(total Tensor, components dict of floats)``.
    """
    cfg = cfg if cfg is not None else LossConfig()
    b = len(gts)
    seed_xyz = seeds.coords
    dtype = votes.coords.dtype
    beta = cfg.huber_beta

    inside_m, vote_t = [], []
    obj_t, assign = [], []
    for i, (boxes, labels) in enumerate(gts):
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 6)
        m, t = vote_targets(seed_xyz[i], boxes)
        inside_m.append(m)
        vote_t.append(t)
        o, a = proposal_targets(props.cluster_centers[i], boxes, labels, cfg)
        obj_t.append(o)
        assign.append(a)
    inside_m, vote_t = np.stack(inside_m), np.stack(vote_t)
    obj_t = np.stack(obj_t)

    zero = Tensor(np.zeros((), dtype=dtype))
    # (a) votes of seeds inside objects regress to their object's center
    n_in = int(inside_m.sum())
    if n_in:
        diff = votes.coords - Tensor(vote_t.astype(dtype))
        per = F.smooth_l1(diff, beta).sum(axis=-1)
        vote_loss = (per * inside_m.astype(dtype)).sum() * (1.0 / n_in)
    else:
        vote_loss = zero

    # (b) objectness on proposals that are clearly near or far from objects
    valid = obj_t >= 0
    if valid.any():
        weight = np.where(obj_t == 1, 1.0, cfg.neg_objectness_weight) * valid
        logits = props.objectness_logits.reshape(-1, 2)
        obj_loss = F.cross_entropy(logits, np.maximum(obj_t, 0).reshape(-1),
                                   weight.reshape(-1).astype(dtype))
    else:
        obj_loss = zero

    # (c, d) box and class terms on positives
    pos = obj_t == 1
    n_pos = int(pos.sum())
    if n_pos:
        c_t = np.zeros(props.cluster_centers.shape)  # absolute gt centers
        s_t = np.zeros(props.cluster_centers.shape)
        l_t = np.zeros(pos.shape, dtype=np.int64)
        for i, (boxes, labels) in enumerate(gts):
            if len(boxes) == 0:
                continue
            boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 6)
            a = assign[i]
            c_t[i] = boxes[a, :3]
            s_t[i] = np.log(boxes[a, 3:] / props.base_size)
            l_t[i] = np.asarray(labels)[a]
        w = pos.astype(dtype)[..., None] * (1.0 / n_pos)
        center_err = props.predicted_centers() - Tensor(c_t.astype(dtype))
        center_loss = (F.smooth_l1(center_err, beta) * w).sum()
        size_loss = (F.smooth_l1(props.log_sizes - Tensor(s_t.astype(dtype)), beta) * w).sum()
        box_loss = center_loss + size_loss
        cls_loss = F.cross_entropy(props.class_logits.reshape(-1, props.class_logits.shape[-1]),
                                   l_t.reshape(-1), pos.reshape(-1).astype(dtype))
    else:
        box_loss = cls_loss = zero

    total = (vote_loss * cfg.vote_weight + obj_loss * cfg.objectness_weight
             + box_loss * cfg.box_weight + cls_loss * cfg.class_weight)
    comps = {"vote": vote_loss.item(), "objectness": obj_loss.item(), "box": box_loss.item(),
             "class": cls_loss.item(), "total": total.item(), "positives": n_pos / max(b, 1)}
    return total, comps
