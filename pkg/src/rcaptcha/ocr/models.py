"""Cracker model zoo: CNN feature extractors feeding sequence or per-slot heads.

Every extractor downsamples 64x192 input by 16x to a (256, 4, 12) feature
map. The sequential head pools columns into 12 time steps and runs a
bidirectional LSTM emitting 37-way token logits (charset + trailing blank
class); the parallel head predicts 4 characters independently; the
single-char head is the 36-way classifier used in data-analysis mode.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..charset import BLANK_INDEX, CHARSET, NUM_CLASSES

EXTRACTORS = ("conv4", "mini_resnet", "mini_densenet", "mini_googlenet")
HEADS = ("sequential", "parallel4", "single_char")
SEQUENCE_STEPS = 12
FEATURE_CHANNELS = 256
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ArchSpec:
    extractor: str = "conv4"
    recurrent_width: int = 256
    head: str = "sequential"

    def __post_init__(self) -> None:
        if self.extractor not in EXTRACTORS:
            raise ValueError(f"unknown extractor {self.extractor!r}; expected one of {EXTRACTORS}")
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}; expected one of {HEADS}")
        if self.recurrent_width < 1:
            raise ValueError("recurrent_width must be positive")


def _conv_bn_relu(cin: int, cout: int, stride: int = 1, kernel: int = 3) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, kernel, stride=stride, padding=kernel // 2, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class Conv4(nn.Module):
    def __init__(self) -> None:
        super().__init__()
        self.net = nn.Sequential(
            _conv_bn_relu(1, 32, stride=2),
            _conv_bn_relu(32, 64, stride=2),
            _conv_bn_relu(64, 128, stride=2),
            _conv_bn_relu(128, 256, stride=2),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1) -> None:
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = (
            nn.Sequential(nn.Conv2d(cin, cout, 1, stride=stride, bias=False), nn.BatchNorm2d(cout))
            if stride != 1 or cin != cout
            else nn.Identity()
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class MiniResNet(nn.Module):
    """Five residual blocks between an entry and an exit convolution."""

    def __init__(self) -> None:
        super().__init__()
        self.stem = _conv_bn_relu(1, 32, stride=2)
        self.blocks = nn.Sequential(
            ResBlock(32, 32),
            ResBlock(32, 64, stride=2),
            ResBlock(64, 64),
            ResBlock(64, 128, stride=2),
            ResBlock(128, 128),
        )
        self.exit = _conv_bn_relu(128, FEATURE_CHANNELS, stride=2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.exit(self.blocks(self.stem(x)))


class DenseBlock(nn.Module):
    def __init__(self, cin: int, growth: int, layers: int) -> None:
        super().__init__()
        self.layers = nn.ModuleList()
        c = cin
        for _ in range(layers):
            self.layers.append(
                nn.Sequential(nn.BatchNorm2d(c), nn.ReLU(inplace=True), nn.Conv2d(c, growth, 3, padding=1, bias=False))
            )
            c += growth
        self.out_channels = c

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for layer in self.layers:
            x = torch.cat([x, layer(x)], dim=1)
        return x


class MiniDenseNet(nn.Module):
    """Four dense blocks of four convolutions each, halving compressions between."""

    def __init__(self, growth: int = 12) -> None:
        super().__init__()
        self.stem = _conv_bn_relu(1, 32, stride=2)
        blocks, transitions = [], []
        c = 32
        for i in range(4):
            block = DenseBlock(c, growth, layers=4)
            blocks.append(block)
            c = block.out_channels
            if i < 3:
                half = c // 2
                transitions.append(
                    nn.Sequential(nn.Conv2d(c, half, 1, bias=False), nn.BatchNorm2d(half), nn.AvgPool2d(2))
                )
                c = half
        self.blocks = nn.ModuleList(blocks)
        self.transitions = nn.ModuleList(transitions)
        self.exit = nn.Sequential(nn.Conv2d(c, FEATURE_CHANNELS, 1, bias=False), nn.BatchNorm2d(FEATURE_CHANNELS), nn.ReLU(inplace=True))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.stem(x)
        for i, block in enumerate(self.blocks):
            x = block(x)
            if i < 3:
                x = self.transitions[i](x)
        return self.exit(x)


class Inception(nn.Module):
    def __init__(self, cin: int, c1: int, c3r: int, c3: int, c5r: int, c5: int, cp: int) -> None:
        super().__init__()
        self.b1 = _conv_bn_relu(cin, c1, kernel=1)
        self.b3 = nn.Sequential(_conv_bn_relu(cin, c3r, kernel=1), _conv_bn_relu(c3r, c3))
        self.b5 = nn.Sequential(_conv_bn_relu(cin, c5r, kernel=1), _conv_bn_relu(c5r, c5, kernel=5))
        self.bp = nn.Sequential(nn.MaxPool2d(3, stride=1, padding=1), _conv_bn_relu(cin, cp, kernel=1))
        self.out_channels = c1 + c3 + c5 + cp

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.cat([self.b1(x), self.b3(x), self.b5(x), self.bp(x)], dim=1)


class MiniGoogLeNet(nn.Module):
    """Two inception modules on top of a small convolutional stem."""

    def __init__(self) -> None:
        super().__init__()
        self.stem = nn.Sequential(
            _conv_bn_relu(1, 32, stride=2),
            _conv_bn_relu(32, 48),
            _conv_bn_relu(48, 64, stride=2),
        )
        self.inc1 = Inception(64, 24, 32, 48, 8, 16, 16)
        self.pool1 = nn.MaxPool2d(2)
        self.inc2 = Inception(self.inc1.out_channels, 40, 48, 80, 12, 24, 24)
        self.pool2 = nn.MaxPool2d(2)
        self.exit = nn.Sequential(
            _conv_bn_relu(self.inc2.out_channels, 192),
            _conv_bn_relu(192, FEATURE_CHANNELS, kernel=1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.stem(x)
        x = self.pool1(self.inc1(x))
        x = self.pool2(self.inc2(x))
        return self.exit(x)


class SequentialHead(nn.Module):
    def __init__(self, in_channels: int, recurrent_width: int) -> None:
        super().__init__()
        self.rnn = nn.LSTM(in_channels, recurrent_width, bidirectional=True, batch_first=True)
        self.fc = nn.Linear(2 * recurrent_width, NUM_CLASSES + 1)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        cols = features.mean(dim=2)  # (N, C, W')
        steps = F.adaptive_avg_pool1d(cols, SEQUENCE_STEPS).permute(0, 2, 1)
        out, _ = self.rnn(steps)
        return self.fc(out)  # (N, 12, 37)


class Parallel4Head(nn.Module):
    def __init__(self, in_channels: int) -> None:
        super().__init__()
        self.fcs = nn.ModuleList(nn.Linear(in_channels, NUM_CLASSES) for _ in range(4))

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        cols = features.mean(dim=2)
        slots = F.adaptive_avg_pool1d(cols, 4)  # (N, C, 4)
        return torch.stack([fc(slots[:, :, i]) for i, fc in enumerate(self.fcs)], dim=1)  # (N, 4, 36)


class SingleCharHead(nn.Module):
    def __init__(self, in_channels: int) -> None:
        super().__init__()
        self.fc = nn.Linear(in_channels, NUM_CLASSES)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return self.fc(features.mean(dim=(2, 3)))  # (N, 36)


_EXTRACTOR_FACTORY = {
    "conv4": Conv4,
    "mini_resnet": MiniResNet,
    "mini_densenet": MiniDenseNet,
    "mini_googlenet": MiniGoogLeNet,
}


class CrackerNet(nn.Module):
    def __init__(self, arch: ArchSpec) -> None:
        super().__init__()
        self.extractor = _EXTRACTOR_FACTORY[arch.extractor]()
        if arch.head == "sequential":
            self.head = SequentialHead(FEATURE_CHANNELS, arch.recurrent_width)
        elif arch.head == "parallel4":
            self.head = Parallel4Head(FEATURE_CHANNELS)
        else:
            self.head = SingleCharHead(FEATURE_CHANNELS)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """Last convolutional feature maps (the Grad-CAM target layer)."""
        return self.extractor(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


@dataclass
class CrackerModel:
    """A cracker: architecture, weights, and its training fingerprint."""

    arch: ArchSpec
    net: CrackerNet
    charset: str = CHARSET
    fingerprint: dict = dataclasses.field(default_factory=dict)

    def clone(self) -> "CrackerModel":
        model = CrackerModel(arch=self.arch, net=CrackerNet(self.arch), charset=self.charset,
                             fingerprint=copy.deepcopy(self.fingerprint))
        model.net.load_state_dict(copy.deepcopy(self.net.state_dict()))
        model.net.eval()
        return model


def build_model(arch: ArchSpec, seed: int = 0) -> CrackerModel:
    """Fresh model with seeded parameter initialization."""
    torch.manual_seed(seed)
    net = CrackerNet(arch)
    net.eval()
    return CrackerModel(arch=arch, net=net, fingerprint={"init_seed": seed})


def logits_shape(arch: ArchSpec) -> tuple[int, int]:
    if arch.head == "sequential":
        return (SEQUENCE_STEPS, NUM_CLASSES + 1)
    if arch.head == "parallel4":
        return (4, NUM_CLASSES)
    return (1, NUM_CLASSES)


def predict_logits_batch(model: CrackerModel, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Token logits for a stack of (N, H, W) preprocessed images."""
    model.net.eval()
    outs = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            chunk = torch.from_numpy(np.ascontiguousarray(images[start : start + batch_size], dtype=np.float32))
            outs.append(model.net(chunk.unsqueeze(1)).numpy())
    return np.concatenate(outs, axis=0)


def predict_logits(model: CrackerModel, image: np.ndarray) -> np.ndarray:
    """Token logits for one already-preprocessed (H, W) image."""
    if image.ndim != 2:
        raise ValueError(f"expected a 2D preprocessed image, got shape {image.shape}")
    out = predict_logits_batch(model, image[None])[0]
    return out if out.ndim == 2 else out[None]


def decode(tokens) -> str:
    """Collapse runs of identical tokens, then drop blanks."""
    result = []
    prev = None
    for t in tokens:
        t = int(t)
        if not 0 <= t <= BLANK_INDEX:
            raise ValueError(f"token index {t} outside [0, {BLANK_INDEX}]")
        if t != prev and t != BLANK_INDEX:
            result.append(CHARSET[t])
        prev = t
    return "".join(result)


def decode_logits(model: CrackerModel, logits: np.ndarray) -> str:
    tokens = logits.argmax(axis=-1)
    if model.arch.head == "sequential":
        return decode(tokens)
    return "".join(CHARSET[int(t)] for t in np.atleast_1d(tokens))


def crack(model: CrackerModel, raw_image: np.ndarray, preprocess_config) -> str:
    """Full cracking pipeline on a raw RGB image."""
    from ..preprocess import pipeline_forward

    processed = pipeline_forward(raw_image, preprocess_config)
    return decode_logits(model, predict_logits(model, processed))


def save_checkpoint(model: CrackerModel, path) -> None:
    torch.save(
        {
            "format_version": CHECKPOINT_VERSION,
            "arch": dataclasses.asdict(model.arch),
            "charset": model.charset,
            "state_dict": model.net.state_dict(),
            "fingerprint": model.fingerprint,
        },
        path,
    )


def load_checkpoint(path) -> CrackerModel:
    doc = torch.load(path, map_location="cpu", weights_only=True)
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('format_version')!r}")
    arch = ArchSpec(**doc["arch"])
    net = CrackerNet(arch)
    net.load_state_dict(doc["state_dict"])
    net.eval()
    return CrackerModel(arch=arch, net=net, charset=doc["charset"], fingerprint=doc["fingerprint"])


def dataset_hash(manifest) -> str:
    h = hashlib.sha256()
    for e in manifest.entries:
        h.update(f"{e.path}|{e.label}|{e.complexity}|{e.seed}\n".encode())
    return h.hexdigest()[:16]
