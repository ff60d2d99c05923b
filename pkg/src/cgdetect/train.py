"""Training and evaluation loops."""
from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from . import ops
from .data import Manifest, Metrics, accuracy, batch_iterator, load_samples
from .model import DualStreamModel, ModelConfig, build_model
from .params import SgdConfig, learning_rate, save_checkpoint, sgd_step

log = logging.getLogger("cgdetect.train")

# decoded-image cache is only worth it (and only safe, memory-wise) for
# desk-scale datasets
CACHE_SAMPLE_LIMIT = 4096


def _make_cache(*manifests) -> dict | None:
    total = sum(len(m) for m in manifests)
    return {} if total <= CACHE_SAMPLE_LIMIT else None


def evaluate(model: DualStreamModel, manifest: Manifest, batch_size: int = 64,
             cache: dict | None = None) -> Metrics:
    """Eval-mode accuracy over a manifest."""
    preds, labels = [], []
    for start in range(0, len(manifest), batch_size):
        pixels, labs, kept = load_samples(
            manifest, range(start, min(start + batch_size, len(manifest))),
            model.cfg.crop, cache)
        if pixels is None:
            continue
        logits = model.forward(pixels, mode="eval")
        preds.append(logits.argmax(axis=1))
        labels.append(labs)
    if not preds:
        raise ValueError("no usable samples to evaluate")
    return accuracy(np.concatenate(preds), np.concatenate(labels))


def train(model: DualStreamModel, sgd: SgdConfig, train_manifest: Manifest,
          val_manifest: Manifest, seed: int, *,
          log_path=None, checkpoint_path=None, resolved_config=None,
          quiet: bool = False):
    """Full training loop.

    Writes one CSV row per epoch (epoch, lr, train_loss, val_acc), keeps the
    best-validation checkpoint next to the final one, and raises NumericError
    with epoch/batch coordinates if the loss goes non-finite.

    Returns the history as a list of (epoch, lr, train_loss, val_acc).
    """
    cache = _make_cache(train_manifest, val_manifest)
    history = []
    best_acc = -1.0
    log_lines = []
    if resolved_config:
        log_lines.extend(f"# {key}={value}" for key, value in resolved_config)
    log_lines.append("epoch,lr,train_loss,val_acc")

    config_json = model.cfg.to_json()
    best_path = None
    if checkpoint_path is not None:
        checkpoint_path = Path(checkpoint_path)
        best_path = checkpoint_path.with_name(checkpoint_path.stem + ".best"
                                              + checkpoint_path.suffix)

    for epoch in range(sgd.epochs):
        lr = learning_rate(sgd, epoch)
        losses = []
        for batch_no, (pixels, labels) in enumerate(
                batch_iterator(train_manifest, sgd.batch_size, seed, epoch,
                               model.cfg.crop, cache)):
            logits = model.forward(pixels, mode="train")
            loss, dlogits = ops.softmax_cross_entropy(logits, labels)
            if not np.isfinite(loss):
                raise ops.NumericError(
                    f"non-finite loss at epoch {epoch}, batch {batch_no}")
            model.backward(dlogits)
            sgd_step(model.store, epoch, sgd)
            losses.append(loss)
        train_loss = float(np.mean(losses))
        val_acc = evaluate(model, val_manifest, sgd.batch_size, cache).acc
        history.append((epoch, lr, train_loss, val_acc))
        log_lines.append(f"{epoch},{lr:.10g},{train_loss:.6f},{val_acc:.6f}")
        if not quiet:
            log.info("epoch %d  lr %.3g  loss %.4f  val_acc %.4f",
                     epoch, lr, train_loss, val_acc)
        if checkpoint_path is not None and val_acc > best_acc:
            best_acc = val_acc
            save_checkpoint(best_path, model.store, config_json)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model.store, config_json)
    if log_path is not None:
        Path(log_path).write_text("\n".join(log_lines) + "\n")
    return history
