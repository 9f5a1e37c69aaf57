"""Deterministic synthesis of character CAPTCHA images and datasets.

Three complexity levels: ``easy`` is plain glyphs on a uniform light
background, ``medium`` adds per-character rotation (±15°) and horizontal
jitter (up to 20% of the glyph width), ``hard`` additionally draws 2-4
occluding line segments and a light background speckle texture.

All randomness comes from a generator seeded by the spec, so the same
spec always produces bit-identical rasters.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from .charset import CHARSET, validate_label
from .images import save_png, to_float

COMPLEXITIES = ("easy", "medium", "hard")
STANDARD_SIZE = (192, 64)  # (width, height)
SINGLE_CHAR_SIZE = (48, 64)
DEFAULT_FONT_ID = "dejavu-sans-mono"
MANIFEST_VERSION = 1

_FONT_FILES = {DEFAULT_FONT_ID: "DejaVuSansMono.ttf"}
_FONT_CACHE: dict[tuple[str, int], ImageFont.FreeTypeFont] = {}


def _load_font(font_id: str, size: int) -> ImageFont.FreeTypeFont:
    key = (font_id, size)
    if key not in _FONT_CACHE:
        try:
            filename = _FONT_FILES[font_id]
        except KeyError:
            raise ValueError(f"unknown font_id {font_id!r}") from None
        path = resources.files("rcaptcha") / "fonts" / filename
        with resources.as_file(path) as p:
            _FONT_CACHE[key] = ImageFont.truetype(str(p), size)
    return _FONT_CACHE[key]


@dataclass(frozen=True)
class RenderSpec:
    label: str
    complexity: str = "easy"
    width: int = STANDARD_SIZE[0]
    height: int = STANDARD_SIZE[1]
    font_id: str = DEFAULT_FONT_ID
    seed: int = 0

    def __post_init__(self) -> None:
        validate_label(self.label)
        if self.complexity not in COMPLEXITIES:
            raise ValueError(f"complexity must be one of {COMPLEXITIES}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")


@dataclass
class CaptchaSample:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    label: str
    complexity: str
    seed: int
    char_masks: np.ndarray = field(repr=False, default=None)  # (len(label), H, W) bool

    @property
    def glyph_mask(self) -> np.ndarray:
        """Union of the per-character glyph masks."""
        return self.char_masks.any(axis=0)


def _draw_speckle(draw: ImageDraw.ImageDraw, rng: np.random.Generator, width: int, height: int) -> None:
    # faint texture: mostly above the binarization cut, occasionally below
    count = int(rng.integers(60, 120))
    for _ in range(count):
        x = int(rng.integers(0, width))
        y = int(rng.integers(0, height))
        r = int(rng.integers(1, 3))
        shade = int(rng.integers(170, 235))
        draw.ellipse((x - r, y - r, x + r, y + r), fill=(shade, shade, shade))


def _draw_occlusions(draw: ImageDraw.ImageDraw, rng: np.random.Generator, width: int, height: int) -> None:
    count = int(rng.integers(2, 5))
    for _ in range(count):
        x0 = int(rng.integers(0, width // 4))
        x1 = int(rng.integers(3 * width // 4, width))
        y0 = int(rng.integers(0, height))
        y1 = int(rng.integers(0, height))
        shade = tuple(int(v) for v in rng.integers(0, 80, size=3))
        draw.line((x0, y0, x1, y1), fill=shade, width=int(rng.integers(1, 3)))


def _glyph_tile(
    char: str, font: ImageFont.FreeTypeFont, color: tuple[int, int, int], angle: float
) -> Image.Image:
    left, top, right, bottom = font.getbbox(char)
    pad = 2
    tile = Image.new("RGBA", (right - left + 2 * pad, bottom - top + 2 * pad), (0, 0, 0, 0))
    ImageDraw.Draw(tile).text((pad - left, pad - top), char, font=font, fill=color + (255,))
    if angle != 0.0:
        tile = tile.rotate(angle, resample=Image.BICUBIC, expand=True)
    return tile


def render_captcha(spec: RenderSpec) -> CaptchaSample:
    """Render ``spec`` to an RGB sample with per-character glyph masks."""
    rng = np.random.default_rng(spec.seed)
    width, height = spec.width, spec.height
    n = len(spec.label)

    bg = tuple(int(v) for v in rng.integers(235, 256, size=3))
    canvas = Image.new("RGB", (width, height), bg)
    draw = ImageDraw.Draw(canvas)
    if spec.complexity == "hard":
        _draw_speckle(draw, rng, width, height)

    font_size = int(round(height * 0.82))
    font = _load_font(spec.font_id, font_size)
    cell = width / n
    masks = np.zeros((n, height, width), dtype=bool)

    for i, char in enumerate(spec.label):
        color = tuple(int(v) for v in rng.integers(0, 70, size=3))
        angle = float(rng.uniform(-15.0, 15.0)) if spec.complexity != "easy" else 0.0
        tile = _glyph_tile(char, font, color, angle)
        jitter = float(rng.uniform(-0.2, 0.2)) * tile.width if spec.complexity != "easy" else 0.0
        x = int(round(i * cell + (cell - tile.width) / 2 + jitter))
        y = int(round((height - tile.height) / 2))
        x = max(0, min(x, width - tile.width)) if tile.width <= width else 0
        y = max(0, min(y, height - tile.height)) if tile.height <= height else 0
        canvas.paste(tile, (x, y), tile)

        alpha = np.asarray(tile)[..., 3] > 0
        h, w = alpha.shape
        h_fit, w_fit = min(h, height - y), min(w, width - x)
        masks[i, y : y + h_fit, x : x + w_fit] = alpha[:h_fit, :w_fit]

    if spec.complexity == "hard":
        _draw_occlusions(ImageDraw.Draw(canvas), rng, width, height)

    image = to_float(np.asarray(canvas))
    return CaptchaSample(image=image, label=spec.label, complexity=spec.complexity, seed=spec.seed, char_masks=masks)


def render_single_char(char: str, seed: int, complexity: str = "easy") -> CaptchaSample:
    """48x64 single-character sample for data-analysis mode."""
    spec = RenderSpec(
        label=char,
        complexity=complexity,
        width=SINGLE_CHAR_SIZE[0],
        height=SINGLE_CHAR_SIZE[1],
        seed=seed,
    )
    return render_captcha(spec)


@dataclass
class ManifestEntry:
    path: str  # relative to the manifest file
    label: str
    complexity: str
    seed: int


@dataclass
class DatasetManifest:
    mode: str  # "standard" | "single-char"
    charset: str = CHARSET
    version: int = MANIFEST_VERSION
    entries: list[ManifestEntry] = field(default_factory=list)
    root: Path | None = None  # directory the entry paths are relative to

    def __post_init__(self) -> None:
        paths = [e.path for e in self.entries]
        if len(set(paths)) != len(paths):
            raise ValueError("manifest contains duplicate paths")
        for e in self.entries:
            validate_label(e.label)

    def __len__(self) -> int:
        return len(self.entries)

    def image_path(self, entry: ManifestEntry) -> Path:
        return (self.root / entry.path) if self.root is not None else Path(entry.path)

    def save(self, path: str | os.PathLike) -> None:
        path = Path(path)
        doc = {
            "version": self.version,
            "mode": self.mode,
            "charset": self.charset,
            "entries": [dataclasses.asdict(e) for e in self.entries],
        }
        path.write_text(json.dumps(doc, indent=1))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "DatasetManifest":
        path = Path(path)
        doc = json.loads(path.read_text())
        if doc.get("version") != MANIFEST_VERSION:
            raise ValueError(f"unsupported manifest version {doc.get('version')!r}")
        entries = [ManifestEntry(**e) for e in doc["entries"]]
        return cls(
            mode=doc["mode"], charset=doc["charset"], version=doc["version"], entries=entries, root=path.parent
        )


def sample_from_entry(manifest: DatasetManifest, entry: ManifestEntry) -> CaptchaSample:
    """Re-render an entry from its seed (recovers glyph masks deterministically)."""
    if manifest.mode == "single-char":
        return render_single_char(entry.label, entry.seed, entry.complexity)
    return render_captcha(RenderSpec(label=entry.label, complexity=entry.complexity, seed=entry.seed))


def _entry_label(rng: np.random.Generator, mode: str) -> str:
    length = 1 if mode == "single-char" else 4
    return "".join(CHARSET[int(i)] for i in rng.integers(0, len(CHARSET), size=length))


def generate_dataset(
    count: int,
    complexity: str,
    out_dir: str | os.PathLike,
    mode: str = "standard",
    seed: int = 0,
) -> DatasetManifest:
    """Write ``count`` PNG samples plus a ``manifest.json`` under ``out_dir``.

    Each entry is derived from ``seed ^ index`` so generation can be
    sharded without changing the result.
    """
    if count <= 0:
        raise ValueError("count must be positive")
    if mode not in ("standard", "single-char"):
        raise ValueError("mode must be 'standard' or 'single-char'")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)

    entries = []
    for index in range(count):
        entry_seed = seed ^ index
        rng = np.random.default_rng(entry_seed)
        label = _entry_label(rng, mode)
        if mode == "single-char":
            sample = render_single_char(label, entry_seed, complexity)
        else:
            sample = render_captcha(RenderSpec(label=label, complexity=complexity, seed=entry_seed))
        rel = f"images/{index:06d}_{label}.png"
        save_png(sample.image, out_dir / rel)
        entries.append(ManifestEntry(path=rel, label=label, complexity=complexity, seed=entry_seed))

    manifest = DatasetManifest(mode=mode, entries=entries, root=out_dir)
    manifest.save(out_dir / "manifest.json")
    return manifest
