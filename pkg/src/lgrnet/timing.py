"""Per-stage wall-clock timing of a detector forward pass.

The forward pass is replayed step by step so each stage runs under its own
timer: the timers are disjoint and their sum is the whole pass.
"""

import time
from contextlib import contextmanager

import numpy as np

from lgrnet import geometry
from lgrnet.backbone import SeedSet, stage_seed
from lgrnet.detect import decode, propose, vote
from lgrnet.errors import InvalidArgument
from lgrnet.geometry import PointCloud
from lgrnet.lgr import render_tensor
from lgrnet.nncore import Tensor, gather_rows, no_grad

STAGES = ("sampling", "query", "render", "cnn", "propagation", "head")


class StageTimer:
    def __init__(self):
        self.totals = dict.fromkeys(STAGES, 0.0)

    @contextmanager
    def __call__(self, stage):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.totals[stage] += time.perf_counter() - t0


def _sp_timed(stage, coords, feats, seeds, timer):
    region = stage.cfg.region
    b = coords.shape[0]
    centers, idx, local = [], [], []
    for i in range(b):
        pc = PointCloud(coords[i], feats.data[i])
        with timer("sampling"):
            c = geometry.farthest_point_sample(pc, region.num_regions, seed=seeds[i])
        with timer("query"):
            reg = geometry.query_regions(pc, pc.coords[c], region, seed=seeds[i])
        centers.append(c)
        idx.append(reg.member_idx)
        local.append(reg.local_coords)
    centers, idx, local = np.stack(centers), np.stack(idx), np.stack(local)
    m, k = idx.shape[1:]
    with timer("render"):
        local_feats = gather_rows(feats, idx).reshape(b * m, k, feats.shape[-1])
        grids = render_tensor(local.reshape(b * m, k, 3).astype(feats.dtype), local_feats,
                              stage.cfg.grid, channels_last=True)
    with timer("cnn"):
        out = stage.cnn(grids).reshape(b, m, stage.cfg.out_channels)
    return np.take_along_axis(coords, centers[..., None], axis=1), out, centers


def timed_forward(model, coords, feats, seeds, nms_iou=0.25):
    """Eval-mode detector forward with stage timers.

    Returns ``(detections, timings)`` where timings maps each name in
    :data:`STAGES` to seconds. The detections equal those of
    ``decode(model(coords, feats, seeds)[2])``.
    """
    timer = StageTimer()
    net = model.backbone
    model.eval()
    with no_grad():
        xyz = np.asarray(coords, dtype=np.float64)
        f = Tensor(np.asarray(feats, dtype=net.dtype).reshape(xyz.shape[0], xyz.shape[1], -1))
        outs = []
        input_idx = np.broadcast_to(np.arange(xyz.shape[1]), xyz.shape[:2])
        for s, stage in enumerate(net.stages):
            xyz, f, picked = _sp_timed(stage, xyz, f, [stage_seed(x, s) for x in seeds], timer)
            input_idx = np.take_along_axis(input_idx, picked, axis=1)
            outs.append((xyz, f, input_idx))
        (x2, f2, i2), (x3, f3, _), (x4, f4, _) = outs[1:]
        with timer("propagation"):
            g3 = net.fp1(x4, f4, x3, f3)
            g2 = net.fp2(x3, g3, x2, f2)
        seed_set = SeedSet(coords=x2, feats=g2, input_idx=i2, stage_shapes=[])
        with timer("head"):
            votes = vote(model.voting, seed_set)
            props = propose(model.proposal, votes, [s * 16 + 15 for s in seeds])
            dets = decode(props, nms_iou=nms_iou)
    return dets, timer.totals


def bench(model, cfg, pc, repeat=1, seed=None):
    """Mean per-stage seconds over ``repeat`` passes on one cloud."""
    if repeat < 1:
        raise InvalidArgument("repeat must be >= 1")
    if pc.c != 1:
        raise InvalidArgument("the detector takes the height feature as its only channel")
    seed = cfg["seed"] if seed is None else seed
    totals = dict.fromkeys(STAGES, 0.0)
    for _ in range(repeat):
        _, t = timed_forward(model, pc.coords[None], pc.feats[None], [seed], cfg["head.nms_iou"])
        for k, v in t.items():
            totals[k] += v
    mean = {k: v / repeat for k, v in totals.items()}
    return {"repeat": repeat, "num_points": pc.n, "stages": mean,
            "total": float(sum(mean.values()))}
