"""Training and evaluation pipeline.

All randomness derives from the run seed: parameter initialization, the
per-epoch scene order, augmentation draws and the sampling seeds handed to
the network. Two runs with the same config and data are therefore
identical, which is what makes the metrics JSON byte-reproducible.
"""

import json
import logging
import math
import time
from pathlib import Path

import numpy as np

from lgrnet.dataio import CLASSES, augment
from lgrnet.detect import Detector, average_precision, decode, detection_loss
from lgrnet.errors import ConfigError, InvalidArgument, NumericError
from lgrnet.nncore import Adam, load_checkpoint, no_grad, save_checkpoint, step_decay_lr

log = logging.getLogger(__name__)

CKPT_NAME = "model.ckpt"
LOG_NAME = "train_log.jsonl"
IOU_THRESHOLDS = (0.25, 0.5)
SEED_LIMIT = 2 ** 31

# stream tags for np.random.default_rng([seed, tag, ...])
_EPOCH_STREAM = 1
_EVAL_STREAM = 2


def stack_batch(samples):
    """B x N x 3 coordinates and B x N x 1 heights; every scene needs the same N."""
    sizes = {s.pc.n for s in samples}
    if len(sizes) != 1:
        raise InvalidArgument(f"scenes in a batch must share one point count, got {sorted(sizes)}")
    if any(s.pc.c != 1 for s in samples):
        raise InvalidArgument("scenes must carry exactly one feature channel (height)")
    return (np.stack([s.pc.coords for s in samples]),
            np.stack([s.pc.feats for s in samples]))


def epoch_plan(seed, epoch, n):
    """Scene order, augmentation seeds and network seeds for one epoch."""
    rng = np.random.default_rng([seed, _EPOCH_STREAM, epoch])
    order = rng.permutation(n)
    aug_seeds = rng.integers(SEED_LIMIT, size=n)
    net_seeds = rng.integers(SEED_LIMIT, size=n)
    return order, aug_seeds, net_seeds


def eval_seeds(seed, n):
    """Fixed network seeds for inference on scene ``i`` of a split."""
    return np.random.default_rng([seed, _EVAL_STREAM]).integers(SEED_LIMIT, size=n)


def build_model(cfg):
    rng = np.random.default_rng(cfg["seed"])
    return Detector(cfg.detector, rng=rng, momentum=cfg["train.bn_momentum"])


def save_model(path, model, cfg, **meta):
    save_checkpoint(path, model.state_dict(), {"config": cfg.to_text(), **meta})


def load_model(cfg, path):
    """Detector for ``cfg`` with weights from ``path``."""
    state, meta = load_checkpoint(path)
    model = build_model(cfg)
    try:
        model.load_state_dict(state)
    except InvalidArgument as e:
        raise ConfigError(f"{path}: checkpoint does not match the config: {e}") from None
    return model, meta


def _check_finite(loss, comps, epoch, step):
    if not math.isfinite(float(loss.data)):
        parts = ", ".join(f"{k}={v}" for k, v in comps.items())
        raise NumericError(f"non-finite loss at epoch {epoch} step {step}: {parts}")


def train(cfg, samples, out_dir, on_epoch=None):
    """Train a detector on ``samples`` and write checkpoints and a JSON-lines log.

    ``out_dir`` receives ``model.ckpt`` (final), ``epoch_XXXX.ckpt`` every
    ``train.checkpoint_every`` epochs and ``train_log.jsonl`` with one record
    per epoch. Returns the trained model (left in eval mode).
    """
    if not samples:
        raise InvalidArgument("no training scenes")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seed = cfg["seed"]
    batch = cfg["train.batch_size"]
    max_steps = cfg["train.max_steps"]
    model = build_model(cfg).train()
    opt = Adam(model.parameters(), lr=cfg["train.lr"])
    n = len(samples)
    step = 0
    epoch = 0
    with open(out_dir / LOG_NAME, "w") as log_file:
        for epoch in range(cfg["train.epochs"]):
            opt.lr = step_decay_lr(cfg["train.lr"], epoch, cfg["train.decay_epochs"],
                                   cfg["train.decay_factor"])
            order, aug_seeds, net_seeds = epoch_plan(seed, epoch, n)
            totals = {}
            steps_this_epoch = 0
            for start in range(0, n, batch):
                if max_steps and step >= max_steps:
                    break
                idx = order[start:start + batch]
                scenes = [augment(samples[i], seed=int(aug_seeds[i])) if cfg["train.augment"]
                          else samples[i] for i in idx]
                coords, feats = stack_batch(scenes)
                seeds_used, votes, props = model(coords, feats, [int(net_seeds[i]) for i in idx])
                gts = [(s.boxes, s.labels) for s in scenes]
                loss, comps = detection_loss(props, votes, seeds_used, gts, cfg.loss)
                _check_finite(loss, comps, epoch, step)
                opt.zero_grad()
                loss.backward()
                opt.step()
                step += 1
                steps_this_epoch += 1
                for k, v in comps.items():
                    totals[k] = totals.get(k, 0.0) + float(v)
            if steps_this_epoch == 0:
                break
            record = {
                "epoch": epoch,
                "step": step,
                "lr": opt.lr,
                "losses": {k: v / steps_this_epoch for k, v in totals.items()},
            }
            log_file.write(json.dumps(record, sort_keys=True) + "\n")
            log_file.flush()
            log.info("epoch %d step %d lr %.3g loss %.4f", epoch, step, opt.lr,
                     record["losses"]["total"])
            if on_epoch is not None:
                on_epoch(record)
            every = cfg["train.checkpoint_every"]
            if every and (epoch + 1) % every == 0:
                save_model(out_dir / f"epoch_{epoch + 1:04d}.ckpt", model, cfg,
                           epoch=epoch + 1, step=step)
    model.eval()
    save_model(out_dir / CKPT_NAME, model, cfg, epoch=epoch + 1, step=step)
    return model


def detect_scenes(model, cfg, samples, seeds=None):
    """Post-NMS detections and raw proposals for each scene, in eval mode."""
    model.eval()
    seeds = eval_seeds(cfg["seed"], len(samples)) if seeds is None else seeds
    nms = cfg["head.nms_iou"]
    dets, props_out = [], []
    step = cfg["eval.batch_size"]
    with no_grad():
        for start in range(0, len(samples), step):
            chunk = samples[start:start + step]
            coords, feats = stack_batch(chunk)
            _, _, props = model(coords, feats, [int(s) for s in seeds[start:start + step]])
            dets.extend(decode(props, nms_iou=nms))
            props_out.append(props)
    return dets, props_out


def metrics_from_detections(dets, gts, class_names):
    """Metrics dict: mAP and per-class AP at each IoU threshold.

    Classes without ground truth in the split are reported as null.
    """
    out = {"num_scenes": len(gts), "num_detections": int(sum(len(d) for d in dets))}
    for t in IOU_THRESHOLDS:
        per_class, m = average_precision(dets, gts, t, len(class_names))
        out[f"mAP@{t}"] = None if math.isnan(m) else m
        out[f"AP@{t}"] = {class_names[c]: v for c, v in per_class.items()}
    return out


def evaluate(model, cfg, samples, class_names=CLASSES):
    """Returns ``(metrics, timing)``; only ``metrics`` is deterministic."""
    names = tuple(class_names)[:cfg["head.num_classes"]]
    if len(names) < cfg["head.num_classes"]:
        raise ConfigError("head.num_classes exceeds the number of class names")
    t0 = time.perf_counter()
    dets, _ = detect_scenes(model, cfg, samples)
    elapsed = time.perf_counter() - t0
    metrics = metrics_from_detections(dets, [(s.boxes, s.labels) for s in samples], names)
    timing = {"num_scenes": len(samples), "total_seconds": elapsed,
              "seconds_per_scan": elapsed / max(len(samples), 1)}
    return metrics, timing


def dump_json(obj, path=None):
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text
