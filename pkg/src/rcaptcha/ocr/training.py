"""Cracker training and evaluation on rendered datasets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from ..charset import BLANK_INDEX, CHAR_TO_INDEX
from ..images import load_png
from ..preprocess import PreprocessConfig, pipeline_forward, to_grayscale
from ..renderer import DatasetManifest
from .models import CrackerModel, dataset_hash, decode_logits, predict_logits_batch

LOSSES = ("ctc", "per_position_ce")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    epochs: int = 10
    learning_rate: float = 1e-3
    seed: int = 0
    loss: str | None = None  # None picks by head: ctc for sequential, CE otherwise
    input_mode: str = "preprocessed"  # or "grayscale" (data-analysis classifier)
    augment_analysis: bool = False  # mix in noisy/binarized variants (single-char classifier)
    early_stop_val_accuracy: float | None = None

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.loss is not None and self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}")
        if self.input_mode not in ("preprocessed", "grayscale"):
            raise ValueError("input_mode must be 'preprocessed' or 'grayscale'")


def load_dataset(
    manifest: DatasetManifest, preprocess_config: PreprocessConfig, input_mode: str = "preprocessed"
) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Images as a (N, H, W) float32 stack plus integer label matrix."""
    if not len(manifest):
        raise ValueError("manifest is empty")
    images, labels = [], []
    for entry in manifest.entries:
        raw = load_png(manifest.image_path(entry))
        if input_mode == "preprocessed":
            images.append(pipeline_forward(raw, preprocess_config))
        else:
            images.append(to_grayscale(raw).astype(np.float32))
        labels.append([CHAR_TO_INDEX[c] for c in entry.label])
    x = np.stack(images)
    y = np.asarray(labels, dtype=np.int64)
    return x, y, [e.label for e in manifest.entries]


def _loss_for(model: CrackerModel, config: TrainConfig) -> str:
    if config.loss is not None:
        return config.loss
    return "ctc" if model.arch.head == "sequential" else "per_position_ce"


def _batch_loss(model: CrackerModel, loss_kind: str, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    logits = model.net(x)
    if loss_kind == "ctc":
        log_probs = logits.permute(1, 0, 2).log_softmax(-1)  # (T, N, C)
        input_lengths = torch.full((x.shape[0],), log_probs.shape[0], dtype=torch.long)
        target_lengths = torch.full((x.shape[0],), y.shape[1], dtype=torch.long)
        return F.ctc_loss(log_probs, y, input_lengths, target_lengths, blank=BLANK_INDEX, zero_infinity=True)
    if logits.dim() == 2:  # single-char head
        return F.cross_entropy(logits, y.squeeze(1))
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), y.reshape(-1))


def _augment_analysis_batch(x: torch.Tensor, rng: np.random.Generator, preprocess_config: PreprocessConfig) -> torch.Tensor:
    """Per-sample mix: clean grayscale, heavy white noise, or binarized form.

    The analysis classifier has to stay competent on all three input
    domains the data-analysis experiments feed it.
    """
    out = x.clone()
    modes = rng.integers(0, 3, size=x.shape[0])
    for i, mode in enumerate(modes):
        if mode == 1:
            draws = int(rng.integers(1, 41))
            noise = rng.normal(0.0, np.sqrt(0.01), size=(draws,) + tuple(x.shape[2:])).sum(axis=0)
            out[i, 0] = (out[i, 0] + torch.from_numpy(noise.astype(np.float32))).clamp(0.0, 1.0)
        elif mode == 2:
            img = pipeline_forward(out[i, 0].numpy(), preprocess_config)
            out[i, 0] = torch.from_numpy(img)
    return out


def _accuracy(model: CrackerModel, x: np.ndarray, labels: list[str]) -> float:
    logits = predict_logits_batch(model, x)
    hits = sum(decode_logits(model, logit) == label for logit, label in zip(logits, labels))
    return hits / len(labels)


def train(
    model: CrackerModel,
    manifest: DatasetManifest,
    preprocess_config: PreprocessConfig,
    train_config: TrainConfig,
    val_manifest: DatasetManifest | None = None,
) -> CrackerModel:
    """Train a copy of ``model``; the input model is left untouched.

    The returned model's fingerprint records the dataset hash and the
    final whole-sequence train/validation accuracy.
    """
    trained = model.clone()
    x_np, y_np, labels = load_dataset(manifest, preprocess_config, train_config.input_mode)

    if val_manifest is not None:
        vx, _, vlabels = load_dataset(val_manifest, preprocess_config, train_config.input_mode)
    else:  # hold out the tail 5% (at least one sample)
        split = max(1, len(x_np) // 20) if len(x_np) > 1 else 0
        vx, vlabels = x_np[len(x_np) - split :], labels[len(x_np) - split :]
        if split:
            x_np, y_np, labels = x_np[: len(x_np) - split], y_np[: len(y_np) - split], labels[: len(labels) - split]

    torch.manual_seed(train_config.seed)
    rng = np.random.default_rng(train_config.seed)
    x_all = torch.from_numpy(np.ascontiguousarray(x_np, dtype=np.float32)).unsqueeze(1)
    y_all = torch.from_numpy(y_np)
    optimizer = torch.optim.Adam(trained.net.parameters(), lr=train_config.learning_rate)
    loss_kind = _loss_for(trained, train_config)

    epochs_run = 0
    for _ in range(train_config.epochs):
        trained.net.train()
        perm = torch.from_numpy(rng.permutation(len(x_all)))
        for start in range(0, len(perm), train_config.batch_size):
            idx = perm[start : start + train_config.batch_size]
            xb, yb = x_all[idx], y_all[idx]
            if train_config.augment_analysis:
                xb = _augment_analysis_batch(xb, rng, preprocess_config)
            optimizer.zero_grad()
            loss = _batch_loss(trained, loss_kind, xb, yb)
            if not torch.isfinite(loss):
                raise RuntimeError(f"training diverged: non-finite loss at epoch {epochs_run}")
            loss.backward()
            optimizer.step()
        trained.net.eval()
        epochs_run += 1
        if train_config.early_stop_val_accuracy is not None and len(vlabels):
            if _accuracy(trained, vx, vlabels) >= train_config.early_stop_val_accuracy:
                break

    trained.net.eval()
    sample = min(len(labels), 2000)
    trained.fingerprint = dict(trained.fingerprint)
    trained.fingerprint.update(
        {
            "dataset_hash": dataset_hash(manifest),
            "epochs": epochs_run,
            "seed": train_config.seed,
            "loss": loss_kind,
            "train_accuracy": _accuracy(trained, x_np[:sample], labels[:sample]) if train_config.epochs else None,
            "val_accuracy": _accuracy(trained, vx, vlabels) if train_config.epochs and len(vlabels) else None,
        }
    )
    return trained


def sequence_accuracy(
    model: CrackerModel, manifest: DatasetManifest, preprocess_config: PreprocessConfig
) -> float:
    """Fraction of samples whose cracked string equals the label exactly."""
    x, _, labels = load_dataset(manifest, preprocess_config)
    return _accuracy(model, x, labels)
