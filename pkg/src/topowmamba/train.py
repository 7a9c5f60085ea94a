"""Training, evaluation and prediction drivers."""
from __future__ import annotations

import csv
import io
import json
import logging
import os
from dataclasses import dataclass

import numpy as np

from .autograd import NonFiniteError, Tape, Tensor, no_record
from .checkpoint import atomic_write, checkpoint_load, checkpoint_save
from .data import (DatasetError, load_manifest, load_split, preprocess_slice, read_pgm, read_raw,
                   resize_labels, write_pgm, write_ppm)
from .losses import seg_loss
from .metrics import MetricsReport, case_metrics
from .network import ModelConfig, TopoWMamba, build_model
from .optim import TrainConfig, adamw_step, cosine_lr, init_state

log = logging.getLogger(__name__)

LOG_FILE = "train_log.jsonl"
BEST_CKPT = "best.ckpt"
SUMMARY_FILE = "summary.json"
PALETTE = np.array([[0, 0, 0], [230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200],
                    [245, 130, 48], [145, 30, 180], [70, 240, 240], [240, 50, 230],
                    [210, 245, 60]], dtype=np.uint8)


class TrainingError(RuntimeError):
    pass


class EarlyStopping:
    """Stop once ``patience`` consecutive epochs fail to beat the best metric."""

    def __init__(self, patience: int):
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.patience = patience
        self.best = -np.inf
        self.bad_epochs = 0

    def update(self, metric: float) -> bool:
        """Record one epoch; returns True when the metric improved."""
        if metric > self.best:
            self.best = metric
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def prepare_images(images: np.ndarray, size) -> np.ndarray:
    """(N,H,W) raw slices -> (N,1,h,w) float32 model inputs."""
    if len(images) == 0:
        return np.zeros((0, 1) + tuple(size), np.float32)
    return np.stack([preprocess_slice(im, size) for im in images])


def predict_labels(model: TopoWMamba, inputs: np.ndarray, batch_size: int = 4) -> np.ndarray:
    """Eval-mode argmax over the main logits; (N,1,H,W) -> (N,H,W) uint8."""
    out = []
    with no_record():
        for i in range(0, len(inputs), batch_size):
            logits = model(Tensor(inputs[i:i + batch_size]), training=False).main.data
            out.append(np.argmax(logits, axis=1).astype(np.uint8))
    return np.concatenate(out) if out else np.zeros((0,) + inputs.shape[2:], np.uint8)


def evaluate_masks(ids, preds, gts, num_classes: int, spacing=(1.0, 1.0),
                   class_names=None) -> MetricsReport:
    report = MetricsReport(num_classes, list(class_names or []))
    for cid, p, g in zip(ids, preds, gts):
        report.add_case(cid, case_metrics(p, g, num_classes, spacing))
    return report


def _check_dataset(manifest: dict, cfg: ModelConfig) -> None:
    if manifest["num_classes"] != cfg.num_classes:
        raise DatasetError(f"dataset has {manifest['num_classes']} classes, model expects "
                           f"{cfg.num_classes}")
    if [manifest["h"], manifest["w"]] != list(cfg.input_size):
        raise DatasetError(f"dataset slices are {manifest['h']}x{manifest['w']}, model input_size "
                           f"is {cfg.input_size}")


@dataclass
class TrainResult:
    best_checkpoint: str
    best_val_dice: float
    best_epoch: int
    epochs_run: int
    steps: int
    stopped_early: bool

    def to_dict(self) -> dict:
        return dict(vars(self))


def run_training(model_cfg: ModelConfig, train_cfg: TrainConfig, dataset_dir, out_dir) -> TrainResult:
    """Seeded epoch loop with per-epoch validation, best checkpoint and early stopping.

    Writes ``train_log.jsonl`` (one record per step plus one per epoch),
    ``best.ckpt`` and ``summary.json`` into out_dir.
    """
    manifest = load_manifest(dataset_dir)
    _check_dataset(manifest, model_cfg)
    size = model_cfg.input_size
    _, tr_img, tr_mask = load_split(dataset_dir, train_cfg.train_split, manifest)
    val_ids, va_img, va_mask = load_split(dataset_dir, train_cfg.val_split, manifest)
    if len(tr_img) == 0 or len(va_img) == 0:
        raise DatasetError(f"need samples in both '{train_cfg.train_split}' and "
                           f"'{train_cfg.val_split}' splits")
    x_train, x_val = prepare_images(tr_img, size), prepare_images(va_img, size)
    spacing = manifest.get("spacing_mm", [1.0, 1.0])

    os.makedirs(out_dir, exist_ok=True)
    log_path = os.path.join(out_dir, LOG_FILE)
    ckpt_path = os.path.join(out_dir, BEST_CKPT)

    model = build_model(model_cfg)
    named = dict(model.named_parameters())
    names = list(named)
    params = {k: named[k].data for k in names}
    state = init_state(params)
    shuffle_rng = np.random.default_rng([train_cfg.seed, 1])
    drop_rng = np.random.default_rng([train_cfg.seed, 2])

    bs = train_cfg.batch_size
    steps_per_epoch = -(-len(x_train) // bs)
    total = steps_per_epoch * train_cfg.epochs
    if train_cfg.max_steps is not None:
        total = min(total, train_cfg.max_steps)
    stopper = EarlyStopping(train_cfg.patience)
    step, epoch, best_epoch = 0, 0, 0

    with open(log_path, "w") as fh:
        while step < total and not stopper.should_stop:
            epoch += 1
            order = shuffle_rng.permutation(len(x_train))
            losses = []
            for i in range(0, len(order), bs):
                if step >= total:
                    break
                idx = order[i:i + bs]
                lr = cosine_lr(step, total, train_cfg.lr, train_cfg.lr_min)
                try:
                    with Tape() as tape:
                        out = model(Tensor(x_train[idx]), training=True, rng=drop_rng)
                        loss = seg_loss(out, tr_mask[idx].astype(np.int64))
                    grads = tape.backward(loss, [named[k] for k in names])
                    adamw_step(params, dict(zip(names, grads)), state, step + 1, lr, train_cfg)
                    step += 1
                except NonFiniteError as err:
                    fh.write(_dumps({"epoch": epoch, "step": step + 1, "lr": lr,
                                     "error": str(err)}) + "\n")
                    raise TrainingError(f"epoch {epoch} step {step + 1}: {err}") from err
                losses.append(loss.item())
                fh.write(_dumps({"epoch": epoch, "step": step, "lr": lr,
                                 "loss": losses[-1]}) + "\n")

            preds = predict_labels(model, x_val, bs)
            report = evaluate_masks(val_ids, preds, va_mask, model_cfg.num_classes, spacing,
                                    manifest.get("class_names"))
            val = report.to_dict()["mean"]
            improved = stopper.update(val["dice"])
            if improved:
                best_epoch = epoch
                checkpoint_save(model, state, ckpt_path,
                                {"epoch": epoch, "step": step, "val_mean_dice": val["dice"],
                                 "train_config": train_cfg.to_dict()})
            fh.write(_dumps({"epoch": epoch, "step": step, "lr": lr,
                             "loss": float(np.mean(losses)), "val": val,
                             "improved": improved}) + "\n")
            fh.flush()
            log.info("epoch %d step %d loss %.4f val dice %.2f%s", epoch, step,
                     np.mean(losses), val["dice"], " *" if improved else "")

    result = TrainResult(ckpt_path, float(stopper.best), best_epoch, epoch, step,
                         stopper.should_stop)
    atomic_write(os.path.join(out_dir, SUMMARY_FILE),
                 (json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n").encode())
    return result


def read_log(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def run_evaluation(checkpoint, dataset_dir, split: str = "test", report_path=None,
                   csv_path=None) -> MetricsReport:
    """Argmax predictions of the checkpointed model against the split's masks.

    Writes the JSON report to report_path and the per-case rows to csv_path
    (default: report_path with a .csv suffix) when given.
    """
    model, _, _ = checkpoint_load(checkpoint)
    manifest = load_manifest(dataset_dir)
    _check_dataset(manifest, model.cfg)
    ids, images, masks = load_split(dataset_dir, split, manifest)
    if not ids:
        raise DatasetError(f"split {split!r} is empty")
    preds = predict_labels(model, prepare_images(images, model.cfg.input_size))
    report = evaluate_masks(ids, preds, masks, model.cfg.num_classes,
                            manifest.get("spacing_mm", [1.0, 1.0]), manifest.get("class_names"))
    if report_path is not None:
        atomic_write(report_path, (report.to_json() + "\n").encode())
        if csv_path is None:
            csv_path = os.path.splitext(report_path)[0] + ".csv"
    if csv_path is not None:
        write_case_csv(report, csv_path)
    return report


def write_case_csv(report: MetricsReport, path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["case", "class_id", "dice", "iou", "hd95", "support", "flag"])
    for row in report.case_rows():
        writer.writerow([row[0], row[1]] + [repr(float(v)) for v in row[2:5]] + row[5:])
    atomic_write(path, buf.getvalue().encode())


def load_image_file(path, default_shape) -> np.ndarray:
    """PGM (P5) or raw little-endian f32 of the given shape."""
    try:
        if path.lower().endswith(".pgm"):
            return read_pgm(path)
        return read_raw(path, default_shape, "<f4").astype(np.float64)
    except OSError as err:
        raise DatasetError(f"cannot read {path}: {err}") from err


def overlay_image(gray01: np.ndarray, labels: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Blend the fixed class palette over a [0,1] greyscale slice -> uint8 RGB."""
    base = np.repeat(np.round(gray01 * 255.0)[..., None], 3, axis=-1)
    colors = PALETTE[labels % len(PALETTE)].astype(np.float64)
    fg = (labels > 0)[..., None]
    rgb = np.where(fg, np.round((1 - alpha) * base + alpha * colors), base)
    return rgb.astype(np.uint8)


def run_prediction(checkpoint, paths, out_dir, overlay: bool = False) -> list[str]:
    """Write ``<stem>_mask.pgm`` (class ids, input resolution) per input and,
    with overlay, ``<stem>_overlay.ppm``. Returns the written paths."""
    model, _, _ = checkpoint_load(checkpoint)
    size = model.cfg.input_size
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for path in paths:
        raw = load_image_file(path, tuple(size))
        x = preprocess_slice(raw, size)[None]
        labels = resize_labels(predict_labels(model, x)[0], raw.shape)
        stem = os.path.splitext(os.path.basename(path))[0]
        mask_path = os.path.join(out_dir, stem + "_mask.pgm")
        write_pgm(mask_path, labels)
        written.append(mask_path)
        if overlay:
            ov_path = os.path.join(out_dir, stem + "_overlay.ppm")
            write_ppm(ov_path, overlay_image(preprocess_slice(raw)[0], labels))
            written.append(ov_path)
    return written
