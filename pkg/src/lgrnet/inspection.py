"""Grid dumps and seed traces for looking inside a trained network.

Grid text format::

    LGRGRID1 W H L C
    v(0,0,0,0) ... v(0,0,0,C-1)
    v(0,0,1,0) ...
    ...

one line per voxel in row-major (x, y, z) order, ``C`` values per line,
written with 17 significant digits so parsing gives back the same floats.
"""

from pathlib import Path

import numpy as np

from lgrnet import geometry
from lgrnet.detect import decode
from lgrnet.errors import InvalidArgument, ParseError
from lgrnet.lgr import render
from lgrnet.nncore import no_grad

GRID_MAGIC = "LGRGRID1"


def render_region(pc, index, spec, grid, seed=0):
    """Render the stage region centered on point ``index`` of ``pc``."""
    if not 0 <= index < pc.n:
        raise InvalidArgument(f"centroid index {index} outside 0..{pc.n - 1}")
    regions = geometry.query_regions(pc, pc.coords[[index]], spec, seed=seed)
    return regions, render(regions, grid)


def format_grid(values):
    """Text dump of one W x H x L x C grid."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 4:
        raise InvalidArgument("expected a W x H x L x C grid")
    w, h, l, c = values.shape
    rows = values.reshape(-1, c)
    lines = [f"{GRID_MAGIC} {w} {h} {l} {c}"]
    lines.extend(" ".join(f"{v:.17g}" for v in row) for row in rows)
    return "\n".join(lines) + "\n"


def parse_grid(text, source="<grid>"):
    lines = text.splitlines()
    if not lines:
        raise ParseError("empty grid dump", path=source, line=1)
    head = lines[0].split()
    if len(head) != 5 or head[0] != GRID_MAGIC:
        raise ParseError(f"expected '{GRID_MAGIC} W H L C' header", path=source, line=1)
    try:
        w, h, l, c = (int(t) for t in head[1:])
    except ValueError:
        raise ParseError("non-integer grid dimensions", path=source, line=1) from None
    n = w * h * l
    if len(lines) - 1 != n:
        raise ParseError(f"header promises {n} voxels, found {len(lines) - 1}", path=source,
                         line=len(lines))
    out = np.empty((n, c))
    for i, line in enumerate(lines[1:]):
        tokens = line.split()
        if len(tokens) != c:
            raise ParseError(f"expected {c} values", path=source, line=i + 2)
        try:
            out[i] = [float(t) for t in tokens]
        except ValueError:
            raise ParseError("non-numeric value", path=source, line=i + 2) from None
    return out.reshape(w, h, l, c)


def write_grid(path, values):
    Path(path).write_text(format_grid(values))


def read_grid(path):
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ParseError(f"cannot read: {e.strerror}", path=path) from None
    return parse_grid(text, str(path))


def _floats(a):
    return [float(x) for x in np.asarray(a).reshape(-1)]


def seed_trace(model, pc, seed, nms_iou=0.25):
    """Per-seed coordinates, votes and the proposals each seed fed.

    A seed feeds a proposal when its vote is among the proposal's grouped
    members. ``kept`` marks proposals that survive NMS.
    """
    if pc.c != 1:
        raise InvalidArgument("the detector takes the height feature as its only channel")
    model.eval()
    with no_grad():
        seeds, votes, props = model(pc.coords[None], pc.feats[None], [seed])
    raw = decode(props, apply_nms=False)[0]
    kept = set(int(i) for i in decode(props, nms_iou=nms_iou)[0].source)
    members = props.member_idx[0]
    fed = [set() for _ in range(seeds.coords.shape[1])]
    for p, row in enumerate(members):
        for s in row:
            fed[int(s)].add(p)
    seed_rows = [{
        "index": i,
        "input_index": int(seeds.input_idx[0, i]),
        "coords": _floats(seeds.coords[0, i]),
        "vote": _floats(votes.coords.data[0, i]),
        "proposals": sorted(fed[i]),
    } for i in range(seeds.coords.shape[1])]
    prop_rows = [{
        "index": p,
        "cluster_seed": int(props.cluster_idx[0, p]),
        "center": _floats(raw.boxes[p, :3]),
        "size": _floats(raw.boxes[p, 3:]),
        "label": int(raw.labels[p]),
        "score": float(raw.scores[p]),
        "objectness": float(raw.objectness[p]),
        "kept": p in kept,
        "members": sorted(set(int(s) for s in members[p])),
    } for p in range(len(raw))]
    return {"seed": int(seed), "num_points": pc.n, "seeds": seed_rows, "proposals": prop_rows}
