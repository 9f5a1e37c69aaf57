"""Adversarial CAPTCHA generation.

The generator minimizes  d(x, x') + w * sum_i hinge_i  over the perturbed
image x', where d is squared L2 distance and hinge_i demands that token
positions aligned with an attacked character flip to a designated wrong
character under the ensemble of crackers. The cracking pipeline's hard
preprocessing sits inside the forward pass; its sigmoid surrogate supplies
the backward pass (see :mod:`rcaptcha.preprocess`).

Also hosts the accumulative baselines used by the vulnerability analysis:
sign-gradient perturbation and Gaussian white noise.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .charset import CHARSET, CHAR_TO_INDEX, validate_label
from .images import load_png, save_png
from .ocr.models import CrackerModel, predict_logits
from .preprocess import PreprocessConfig, bpda_pipeline, torch_grayscale
from .renderer import DatasetManifest, ManifestEntry


@dataclass(frozen=True)
class TargetEntry:
    char: str
    target: str
    positions: tuple[int, ...]


@dataclass(frozen=True)
class TargetMap:
    """One-to-one mapping from attacked label characters to wrong characters.

    ``mode="random"`` samples targets uniformly outside the label's character
    set (a targeted attack); ``mode="fixed"`` uses a deterministic cyclic
    shift of the charset.
    """

    entries: tuple[TargetEntry, ...]
    mode: str

    def __post_init__(self) -> None:
        if self.mode not in ("random", "fixed"):
            raise ValueError("mode must be 'random' or 'fixed'")
        seen_targets = set()
        for e in self.entries:
            if e.target == e.char:
                raise ValueError(f"target equals attacked character {e.char!r}")
            if not e.positions:
                raise ValueError("entry has no attacked positions")
            if e.target in seen_targets:
                raise ValueError(f"target {e.target!r} used twice")
            seen_targets.add(e.target)


@dataclass(frozen=True)
class AttackConfig:
    distortion_weight: float = 20.0  # exposed on the CLI as --lambda
    num_attacked: int = 4  # exposed on the CLI as --theta
    mapping: str = "random"
    steps: int = 300
    step_size: float = 0.01
    ensemble_weights: tuple[float, ...] | None = None  # None -> uniform
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    seed: int = 0
    stop_margin: float = 0.5  # early stop once every attacked position clears this logit margin
    use_pipeline: bool = True  # False: attack raw (grayscale) model input, no surrogate

    def __post_init__(self) -> None:
        if self.distortion_weight < 0:
            raise ValueError("distortion_weight must be >= 0")
        if not 1 <= self.num_attacked <= 4:
            raise ValueError("num_attacked must be in 1..4")
        if self.mapping not in ("random", "fixed"):
            raise ValueError("mapping must be 'random' or 'fixed'")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.ensemble_weights is not None:
            w = np.asarray(self.ensemble_weights, dtype=np.float64)
            if (w < 0).any():
                raise ValueError("ensemble weights must be non-negative")
            if abs(w.sum() - 1.0) > 1e-9:
                raise ValueError(f"ensemble weights must sum to 1, got {w.sum()!r}")


@dataclass
class AdversarialResult:
    x_prime: np.ndarray  # (H, W, 3) float32 in [0, 1]
    distortion: float  # sum of squared pixel differences vs. the original
    margins: tuple[float, ...]  # per-entry worst-case logit margin (<= 0 means flipped)
    iterations: int
    success: bool  # all margins <= 0 under the ensemble after real preprocessing
    target_map: TargetMap


@dataclass(frozen=True)
class NoiseSpec:
    mean: float = 0.0
    variance: float = 0.01
    draws_per_level: int = 5
    max_level: int = 8

    def __post_init__(self) -> None:
        if self.variance <= 0:
            raise ValueError("variance must be positive")
        if self.max_level > 8:
            raise ValueError("levels beyond 8 are not supported")


def _argmax_runs(tokens: np.ndarray) -> list[tuple[str, tuple[int, ...]]]:
    """Consecutive non-blank runs of an argmax token sequence."""
    runs: list[tuple[str, list[int]]] = []
    prev = None
    for pos, t in enumerate(tokens):
        t = int(t)
        if t >= len(CHARSET):
            prev = None
            continue
        if prev is not None and runs and runs[-1][0] == CHARSET[t] and prev == t:
            runs[-1][1].append(pos)
        else:
            runs.append((CHARSET[t], [pos]))
        prev = t
    return [(c, tuple(p)) for c, p in runs]


def _aligned_positions(label: str, clean_logits: np.ndarray) -> list[tuple[int, ...]]:
    """Token positions backing each label character, by clean argmax alignment."""
    total = clean_logits.shape[0]
    fallback_stride = -(-total // 4)  # ceil
    runs = _argmax_runs(clean_logits.argmax(axis=-1))
    positions: list[tuple[int, ...]] = []
    cursor = 0
    for i, char in enumerate(label):
        found = None
        for j in range(cursor, len(runs)):
            if runs[j][0] == char:
                found = j
                break
        if found is None:
            positions.append((min(fallback_stride * i, total - 1),))
        else:
            positions.append(runs[found][1])
            cursor = found + 1
    return positions


def build_target_map(
    label: str,
    clean_logits: np.ndarray,
    mode: str = "random",
    num_attacked: int = 4,
    seed: int | tuple[int, ...] = 0,
) -> TargetMap:
    """Pick attacked characters, their wrong targets, and aligned positions.

    ``clean_logits`` are the ensemble logits of the unperturbed image under
    the same forward graph the attack will optimize.
    """
    validate_label(label)
    if num_attacked > len(label):
        raise ValueError(f"num_attacked={num_attacked} exceeds label length {len(label)}")
    positions = _aligned_positions(label, clean_logits)
    label_chars = set(label)
    pool = [c for c in CHARSET if c not in label_chars]
    rng = np.random.default_rng(seed)

    entries = []
    used: set[str] = set()
    for i in range(num_attacked):
        char = label[i]
        if mode == "random":
            candidates = [c for c in pool if c not in used]
            target = str(rng.choice(candidates))
        else:
            k = (CHAR_TO_INDEX[char] + 18) % len(CHARSET)
            while CHARSET[k] in label_chars or CHARSET[k] in used:
                k = (k + 1) % len(CHARSET)
            target = CHARSET[k]
        used.add(target)
        entries.append(TargetEntry(char=char, target=target, positions=positions[i]))
    return TargetMap(entries=tuple(entries), mode=mode)


def resolve_weights(models: list[CrackerModel], config: AttackConfig) -> np.ndarray:
    if config.ensemble_weights is None:
        return np.full(len(models), 1.0 / len(models))
    if len(config.ensemble_weights) != len(models):
        raise ValueError("one ensemble weight per model required")
    return np.asarray(config.ensemble_weights, dtype=np.float64)


def ensemble_logits(models: list[CrackerModel], weights, preprocessed_image: np.ndarray) -> np.ndarray:
    """Weighted sum of per-model token logits on one preprocessed image."""
    w = np.asarray(weights, dtype=np.float64)
    if len(w) != len(models):
        raise ValueError("one weight per model required")
    if abs(w.sum() - 1.0) > 1e-9:
        raise ValueError(f"weights must sum to 1, got {w.sum()!r}")
    shapes = {tuple(predict_logits(m, preprocessed_image).shape) for m in models}
    if len(shapes) != 1:
        raise ValueError(f"models disagree on logits shape: {sorted(shapes)}")
    out = None
    for weight, model in zip(w, models):
        logits = predict_logits(model, preprocessed_image).astype(np.float64)
        out = weight * logits if out is None else out + weight * logits
    return out


def _hinges(ens_logits: np.ndarray, target_map: TargetMap) -> list[float]:
    if not target_map.entries:
        raise ValueError("target map has no entries")
    hinges = []
    for entry in target_map.entries:
        tgt = CHAR_TO_INDEX[entry.target]
        vals = []
        for pos in entry.positions:
            row = ens_logits[pos]
            other = np.delete(row, tgt).max()
            vals.append(max(other - row[tgt], 0.0))
        hinges.append(float(np.mean(vals)))
    return hinges


def attack_loss(
    x: np.ndarray,
    x_prime: np.ndarray,
    ens_logits: np.ndarray,
    target_map: TargetMap,
    distortion_weight: float,
) -> tuple[float, list[float]]:
    """Objective value and per-entry hinge terms (positive parts)."""
    if x.shape != x_prime.shape:
        raise ValueError("x and x_prime must share a shape")
    d = float(((np.asarray(x, np.float64) - np.asarray(x_prime, np.float64)) ** 2).sum())
    hinges = _hinges(np.asarray(ens_logits, np.float64), target_map)
    return d + distortion_weight * float(np.sum(hinges)), hinges


def _model_forward(models: list[CrackerModel], weights: np.ndarray, z: torch.Tensor) -> torch.Tensor:
    out = None
    for w, model in zip(weights, models):
        logits = model.net(z)
        out = float(w) * logits if out is None else out + float(w) * logits
    return out


def _position_tensors(target_maps: list[TargetMap]):
    """Flatten (image, entry, position) triples for vectorized hinge math."""
    img_idx, pos_idx, tgt_idx, entry_idx, pos_weight = [], [], [], [], []
    entry_of_image: list[list[int]] = []
    entry_counter = 0
    for i, tm in enumerate(target_maps):
        entry_of_image.append([])
        for entry in tm.entries:
            for pos in entry.positions:
                img_idx.append(i)
                pos_idx.append(pos)
                tgt_idx.append(CHAR_TO_INDEX[entry.target])
                entry_idx.append(entry_counter)
                pos_weight.append(1.0 / len(entry.positions))
            entry_of_image[-1].append(entry_counter)
            entry_counter += 1
    return (
        torch.tensor(img_idx, dtype=torch.long),
        torch.tensor(pos_idx, dtype=torch.long),
        torch.tensor(tgt_idx, dtype=torch.long),
        torch.tensor(entry_idx, dtype=torch.long),
        torch.tensor(pos_weight, dtype=torch.float32),
        entry_of_image,
        entry_counter,
    )


def _position_margins(logits: torch.Tensor, pos_idx, tgt_idx, img_rows) -> torch.Tensor:
    """max_{j != target} logit_j − logit_target at each attacked position."""
    rows = logits[img_rows, pos_idx, :]  # (P, C)
    tgt = rows.gather(1, tgt_idx.view(-1, 1)).squeeze(1)
    masked = rows.scatter(1, tgt_idx.view(-1, 1), float("-inf"))
    return masked.max(dim=1).values - tgt


def _forward_graph(x: torch.Tensor, models, weights, config: AttackConfig) -> torch.Tensor:
    if config.use_pipeline:
        z = bpda_pipeline(x, config.preprocess)
    else:
        z = torch_grayscale(x)
    return _model_forward(models, weights, z)


def generate_adversarial_batch(
    images: np.ndarray,
    labels: list[str],
    models: list[CrackerModel],
    config: AttackConfig,
    batch_size: int = 64,
) -> list[AdversarialResult]:
    """Attack a stack of (N, H, W, 3) raw images; one result per image.

    Per-image randomness is seeded by (config.seed, image index), so a rerun
    with the same inputs reproduces every output bitwise.
    """
    images = np.asarray(images, dtype=np.float32)
    results: list[AdversarialResult | None] = [None] * len(images)
    for start in range(0, len(images), batch_size):
        chunk = slice(start, min(start + batch_size, len(images)))
        for offset, res in enumerate(_attack_chunk(images[chunk], labels[chunk], models, config, start)):
            results[start + offset] = res
    return results  # type: ignore[return-value]


def _attack_chunk(
    images: np.ndarray,
    labels: list[str],
    models: list[CrackerModel],
    config: AttackConfig,
    index_base: int,
) -> list[AdversarialResult]:
    weights = resolve_weights(models, config)
    for m in models:
        m.net.eval()
    x0 = torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2)))  # (N, 3, H, W)
    n = x0.shape[0]

    with torch.no_grad():
        clean_logits = _forward_graph(x0, models, weights, config).numpy()
    target_maps = [
        build_target_map(
            labels[i],
            clean_logits[i],
            mode=config.mapping,
            num_attacked=min(config.num_attacked, len(labels[i])),
            seed=(config.seed, index_base + i),
        )
        for i in range(n)
    ]
    img_idx, pos_idx, tgt_idx, entry_idx, pos_weight, entries_of, n_entries = _position_tensors(target_maps)

    x = x0.clone()
    active = torch.ones(n, dtype=torch.bool)
    final_margins = [None] * n
    iterations = [config.steps] * n

    for step in range(config.steps + 1):
        act_rows = torch.nonzero(active).squeeze(1)
        if not len(act_rows):
            break
        row_of = torch.full((n,), -1, dtype=torch.long)
        row_of[act_rows] = torch.arange(len(act_rows))
        sel = row_of[img_idx] >= 0
        p_img = row_of[img_idx[sel]]
        p_pos, p_tgt, p_entry, p_w = pos_idx[sel], tgt_idx[sel], entry_idx[sel], pos_weight[sel]

        xa = x[act_rows].detach().clone().requires_grad_(True)
        logits = _forward_graph(xa, models, weights, config)
        pos_margins = _position_margins(logits, p_pos, p_tgt, p_img)

        with torch.no_grad():
            worst = torch.full((n_entries,), float("-inf"))
            worst.scatter_reduce_(0, p_entry, pos_margins.detach(), reduce="amax")
            done_now = []
            for local, img in enumerate(act_rows.tolist()):
                entry_ids = entries_of[img]
                img_worst = worst[entry_ids]
                if bool((img_worst <= -config.stop_margin).all()) or step == config.steps:
                    final_margins[img] = tuple(float(v) for v in img_worst)
                    iterations[img] = step
                    active[img] = False
                    done_now.append(local)

        still = torch.tensor([i for i in range(len(act_rows)) if i not in set(done_now)], dtype=torch.long)
        if not len(still) or step == config.steps:
            if not active.any():
                break
            continue

        keep = torch.isin(p_img, still)
        hinge_pos = torch.relu(pos_margins[keep]) * p_w[keep]
        per_entry = torch.zeros(n_entries)
        per_entry = per_entry.scatter_add(0, p_entry[keep], hinge_pos)
        dist = ((xa - x0[act_rows]) ** 2).sum(dim=(1, 2, 3))
        loss = dist[still].sum() + config.distortion_weight * per_entry.sum()
        (grad,) = torch.autograd.grad(loss, xa)
        with torch.no_grad():
            upd = act_rows[still]
            x[upd] = (x[upd] - config.step_size * grad[still]).clamp(0.0, 1.0)

    out = []
    for i in range(n):
        xp = x[i].numpy().transpose(1, 2, 0).astype(np.float32)
        distortion = float(((xp.astype(np.float64) - images[i].astype(np.float64)) ** 2).sum())
        margins = final_margins[i]
        out.append(
            AdversarialResult(
                x_prime=xp,
                distortion=distortion,
                margins=margins,
                iterations=iterations[i],
                success=bool(all(m <= 0.0 for m in margins)),
                target_map=target_maps[i],
            )
        )
    return out


def generate_adversarial(
    x: np.ndarray, label: str, models: list[CrackerModel], config: AttackConfig
) -> AdversarialResult:
    """Attack a single raw (H, W, 3) image."""
    if not models:
        raise ValueError("at least one model required")
    return generate_adversarial_batch(x[None], [label], models, config)[0]


def fgsm_perturb(
    model: CrackerModel, x: np.ndarray, label: str, step_size: float = 0.02, num_steps: int = 1
) -> np.ndarray:
    """Accumulative sign-gradient perturbation against a classifier.

    Each step ascends the classification loss of the true label; the image
    is clipped to [0, 1] after every step. Distortion level L corresponds
    to ``num_steps = 5 * L``.
    """
    validate_label(label)
    model.net.eval()
    rgb = x.ndim == 3
    arr = x.transpose(2, 0, 1)[None] if rgb else x[None, None]
    xt = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))
    target = torch.tensor([CHAR_TO_INDEX[c] for c in label], dtype=torch.long)

    for _ in range(num_steps):
        xa = xt.detach().clone().requires_grad_(True)
        logits = model.net(torch_grayscale(xa))
        if model.arch.head == "single_char":
            loss = F.cross_entropy(logits, target)
        elif model.arch.head == "parallel4":
            loss = F.cross_entropy(logits.squeeze(0), target)
        else:
            log_probs = logits.permute(1, 0, 2).log_softmax(-1)
            loss = F.ctc_loss(
                log_probs,
                target.unsqueeze(0),
                torch.tensor([log_probs.shape[0]]),
                torch.tensor([len(label)]),
                blank=len(CHARSET),
                zero_infinity=True,
            )
        (grad,) = torch.autograd.grad(loss, xa)
        xt = (xt + step_size * grad.sign()).clamp(0.0, 1.0)

    out = xt.numpy()[0]
    return out.transpose(1, 2, 0) if rgb else out[0]


def gaussian_distort(
    x: np.ndarray, level: int, noise_spec: NoiseSpec = NoiseSpec(), seed: int = 0
) -> np.ndarray:
    """Accumulate 5*level one-time white-noise draws, then clip to [0, 1].

    Level L+1 extends level L's noise for the same seed, mirroring
    accumulative application.
    """
    if not 0 <= level <= noise_spec.max_level:
        raise ValueError(f"level must be in 0..{noise_spec.max_level}")
    if level == 0:
        return np.asarray(x, dtype=np.float32).copy()
    rng = np.random.default_rng(seed)
    draws = noise_spec.draws_per_level * level
    noise = rng.normal(noise_spec.mean, np.sqrt(noise_spec.variance), size=(draws,) + x.shape).sum(axis=0)
    return np.clip(np.asarray(x, np.float64) + noise, 0.0, 1.0).astype(np.float32)


def attack_manifest(
    manifest: DatasetManifest,
    models: list[CrackerModel],
    config: AttackConfig,
    out_dir,
    batch_size: int = 64,
) -> tuple[DatasetManifest, dict]:
    """Attack every manifest entry; write adversarial PNGs, a mirrored
    manifest, and a results JSON under ``out_dir``."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    images = np.stack([load_png(manifest.image_path(e)) for e in manifest.entries])
    labels = [e.label for e in manifest.entries]
    results = generate_adversarial_batch(images, labels, models, config, batch_size=batch_size)

    entries, records = [], []
    for entry, res in zip(manifest.entries, results):
        rel = f"images/{Path(entry.path).name}"
        save_png(res.x_prime, out_dir / rel)
        entries.append(ManifestEntry(path=rel, label=entry.label, complexity=entry.complexity, seed=entry.seed))
        records.append(
            {
                "path": rel,
                "label": entry.label,
                "distortion": res.distortion,
                "iterations": res.iterations,
                "success": res.success,
                "margins": list(res.margins),
                "targets": [dataclasses.asdict(e) for e in res.target_map.entries],
            }
        )
    adv_manifest = DatasetManifest(mode=manifest.mode, entries=entries, root=out_dir)
    adv_manifest.save(out_dir / "manifest.json")
    summary = {
        "config": _config_doc(config),
        "count": len(records),
        "mean_distortion": float(np.mean([r["distortion"] for r in records])),
        "success_rate": float(np.mean([r["success"] for r in records])),
        "records": records,
    }
    (out_dir / "results.json").write_text(json.dumps(summary, indent=1))
    return adv_manifest, summary


def _config_doc(config: AttackConfig) -> dict:
    doc = dataclasses.asdict(config)
    doc["preprocess"] = dataclasses.asdict(config.preprocess)
    return doc
