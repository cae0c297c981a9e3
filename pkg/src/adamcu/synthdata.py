"""Seeded two-domain synthetic segmentation benchmark.

Scenes are layered rectangles, ellipses and horizontal bands over a
background category.  Each category has a mean colour and a texture noise
scale; the target domain applies a fixed appearance shift (per-channel
gain/bias, contrast about mid-grey, additive noise) to the rendering while
the layout distribution is unchanged.

On-disk layout (all little-endian)::

    manifest.txt   "# adamcu-synth v1 count=<n> height=<h> width=<w> classes=<c>"
                   then one line per image: "<id>,<file>,<domain>,<split>"
    <file>.bin     b"SYNB" | uint32 height | uint32 width | uint32 channels
                   | float32[h*w*channels] image (row-major HWC)
                   | uint8[h*w] labels
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

BLOB_MAGIC = b"SYNB"
MANIFEST_TAG = "adamcu-synth v1"
MAX_ATTEMPTS = 100

# category palette and texture noise; categories 1 and 2 share hue family
# and differ mostly in texture
_PALETTE = np.array(
    [
        [0.40, 0.40, 0.42],
        [0.62, 0.48, 0.36],
        [0.56, 0.50, 0.30],
        [0.45, 0.62, 0.85],
        [0.25, 0.55, 0.25],
        [0.80, 0.30, 0.30],
        [0.30, 0.30, 0.70],
        [0.75, 0.75, 0.30],
    ]
)
_TEXTURE = np.array([0.03, 0.05, 0.12, 0.02, 0.09, 0.04, 0.06, 0.08])


@dataclass
class SceneSpec:
    height: int = 64
    width: int = 64
    num_classes: int = 4
    min_shapes: int = 2
    max_shapes: int = 5
    colors: np.ndarray | None = None
    texture: np.ndarray | None = None

    def palette(self) -> tuple[np.ndarray, np.ndarray]:
        if self.colors is not None:
            colors = np.asarray(self.colors, dtype=np.float64)
        else:
            colors = _default_colors(self.num_classes)
        if self.texture is not None:
            tex = np.asarray(self.texture, dtype=np.float64)
        else:
            tex = _TEXTURE[np.arange(self.num_classes) % len(_TEXTURE)]
        if colors.shape != (self.num_classes, 3) or tex.shape != (self.num_classes,):
            raise ValueError("SceneSpec: palette does not match num_classes")
        return colors, tex

    def validate(self):
        if self.num_classes < 2 or self.num_classes > 255:
            raise ValueError(f"num_classes must be in [2, 255], got {self.num_classes}")
        if self.height < 4 or self.width < 4:
            raise ValueError("image must be at least 4x4")
        if not 1 <= self.min_shapes <= self.max_shapes:
            raise ValueError("need 1 <= min_shapes <= max_shapes")


def _default_colors(c: int) -> np.ndarray:
    if c <= len(_PALETTE):
        return _PALETTE[:c].copy()
    rng = np.random.default_rng(12345)
    extra = rng.uniform(0.15, 0.85, size=(c - len(_PALETTE), 3))
    return np.vstack([_PALETTE, extra])


@dataclass
class DomainShift:
    gain: tuple[float, float, float] = (1.0, 1.0, 1.0)
    bias: tuple[float, float, float] = (0.0, 0.0, 0.0)
    contrast: float = 1.0
    noise: float = 0.0

    def apply(self, img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        out = img * np.asarray(self.gain) + np.asarray(self.bias)
        out = 0.5 + self.contrast * (out - 0.5)
        if self.noise > 0:
            out = out + rng.normal(0.0, self.noise, size=out.shape)
        return out

    def mean_map(self, channel_means: np.ndarray) -> np.ndarray:
        """Expected channel means after the shift (it is affine)."""
        return 0.5 + self.contrast * (channel_means * np.asarray(self.gain) + np.asarray(self.bias) - 0.5)

    @classmethod
    def identity(cls) -> "DomainShift":
        return cls()


def default_target_shift() -> DomainShift:
    return DomainShift(gain=(1.5, 0.7, 0.9), bias=(-0.15, 0.12, 0.05), contrast=0.7, noise=0.06)


@dataclass
class SynthDataset:
    images: np.ndarray  # N,H,W,3 float32
    labels: np.ndarray  # N,H,W uint8
    domain: str
    split: str
    num_classes: int
    ids: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.images)

    @property
    def key(self) -> str:
        return f"{self.domain}/{self.split}"

    def num_pixels(self) -> int:
        return int(self.labels.size)


def _render_layout(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.height, spec.width
    lab = np.full((h, w), rng.integers(spec.num_classes), dtype=np.uint8)
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(rng.integers(spec.min_shapes, spec.max_shapes + 1)):
        cat = rng.integers(spec.num_classes)
        kind = rng.integers(3)
        if kind == 0:
            y0, x0 = rng.integers(0, h - 4), rng.integers(0, w - 4)
            y1 = rng.integers(y0 + 4, min(h, y0 + h // 2) + 1)
            x1 = rng.integers(x0 + 4, min(w, x0 + w // 2) + 1)
            mask = (yy >= y0) & (yy < y1) & (xx >= x0) & (xx < x1)
        elif kind == 1:
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            ry, rx = rng.uniform(h / 12, h / 4), rng.uniform(w / 12, w / 4)
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        else:
            y0 = rng.integers(0, h - 3)
            y1 = rng.integers(y0 + 3, min(h, y0 + h // 4) + 1)
            mask = (yy >= y0) & (yy < y1)
        lab[mask] = cat
    return lab


def _render_appearance(lab: np.ndarray, colors: np.ndarray, tex: np.ndarray,
                       rng: np.random.Generator) -> np.ndarray:
    noise = rng.normal(size=lab.shape + (3,))
    # 3-tap horizontal smoothing gives the texture some spatial structure
    noise = (noise + np.roll(noise, 1, axis=1) + np.roll(noise, -1, axis=1)) / np.sqrt(3.0)
    return colors[lab] + tex[lab][..., None] * noise


def generate(seed: int, n_images: int, spec: SceneSpec | None = None,
             shift: DomainShift | None = None, domain: str = "source",
             split: str = "train") -> SynthDataset:
    """Generate ``n_images`` scenes.  Layout and texture depend only on
    ``seed`` and the image index, so the identity shift reproduces the
    source rendering for equal seeds."""
    spec = spec or SceneSpec()
    spec.validate()
    if n_images < 1:
        raise ValueError(f"n_images must be >= 1, got {n_images}")
    shift = shift or DomainShift.identity()
    colors, tex = spec.palette()
    floor = 0.05
    for attempt in range(MAX_ATTEMPTS):
        labels = np.empty((n_images, spec.height, spec.width), dtype=np.uint8)
        images = np.empty((n_images, spec.height, spec.width, 3), dtype=np.float32)
        for i in range(n_images):
            rng = np.random.default_rng([seed, attempt, i])
            for _ in range(MAX_ATTEMPTS):
                lab = _render_layout(spec, rng)
                if len(np.unique(lab)) >= 2:
                    break
            else:
                raise ValueError(f"image {i}: could not draw a layout with 2 categories")
            img = _render_appearance(lab, colors, tex, rng)
            img = shift.apply(img, np.random.default_rng([seed, attempt, i, 1]))
            labels[i] = lab
            images[i] = img.astype(np.float32)
        counts = np.array([(labels == c).any(axis=(1, 2)).sum() for c in range(spec.num_classes)])
        if counts.min() >= np.ceil(floor * n_images):
            ids = [f"{domain}_{split}_{i:05d}" for i in range(n_images)]
            return SynthDataset(images, labels, domain, split, spec.num_classes, ids)
    raise ValueError(
        f"could not satisfy the category-presence floor ({floor:.0%}) after {MAX_ATTEMPTS} attempts"
    )


@dataclass
class Benchmark:
    source_train: SynthDataset
    target_train: SynthDataset
    target_val: SynthDataset

    def splits(self) -> list[SynthDataset]:
        return [self.source_train, self.target_train, self.target_val]


def make_benchmark(seed: int, n_source: int = 200, n_target: int = 100, n_val: int = 50,
                   spec: SceneSpec | None = None, shift: DomainShift | None = None) -> Benchmark:
    spec = spec or SceneSpec()
    shift = shift if shift is not None else default_target_shift()
    ss = np.random.SeedSequence(seed).generate_state(3)
    return Benchmark(
        generate(int(ss[0]), n_source, spec, DomainShift.identity(), "source", "train"),
        generate(int(ss[1]), n_target, spec, shift, "target", "train"),
        generate(int(ss[2]), n_val, spec, shift, "target", "val"),
    )


# ---------------------------------------------------------------- file I/O


def _write_blob(path: Path, img: np.ndarray, lab: np.ndarray):
    h, w, c = img.shape
    with open(path, "wb") as fh:
        fh.write(BLOB_MAGIC + struct.pack("<3I", h, w, c))
        fh.write(np.ascontiguousarray(img, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(lab, dtype=np.uint8).tobytes())


def _read_blob(path: Path) -> tuple[np.ndarray, np.ndarray]:
    raw = path.read_bytes()
    if len(raw) < 16:
        raise ValueError(f"{path}: truncated header at offset {len(raw)}, expected 16 bytes")
    if raw[:4] != BLOB_MAGIC:
        raise ValueError(f"{path}: corrupt header at offset 0 (bad magic {raw[:4]!r})")
    h, w, c = struct.unpack_from("<3I", raw, 4)
    expected = 16 + 4 * h * w * c + h * w
    if len(raw) != expected:
        raise ValueError(f"{path}: expected length {expected} bytes, actual {len(raw)}")
    img = np.frombuffer(raw, dtype="<f4", count=h * w * c, offset=16).reshape(h, w, c)
    lab = np.frombuffer(raw, dtype=np.uint8, count=h * w, offset=16 + 4 * h * w * c).reshape(h, w)
    return img.astype(np.float32), lab.copy()


def save(datasets, path) -> Path:
    """Write one or more datasets into directory ``path`` with a single manifest."""
    if isinstance(datasets, SynthDataset):
        datasets = [datasets]
    elif isinstance(datasets, Benchmark):
        datasets = datasets.splits()
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    ds0 = datasets[0]
    _, h, w = ds0.labels.shape
    total = int(np.sum([len(d) for d in datasets]))
    lines = [f"# {MANIFEST_TAG} count={total} height={h} width={w} classes={ds0.num_classes}"]
    for ds in datasets:
        ids = ds.ids or [f"{ds.domain}_{ds.split}_{i:05d}" for i in range(len(ds))]
        for i, ident in enumerate(ids):
            fname = f"{ident}.bin"
            _write_blob(root / fname, ds.images[i], ds.labels[i])
            lines.append(f"{ident},{fname},{ds.domain},{ds.split}")
    (root / "manifest.txt").write_text("\n".join(lines) + "\n")
    return root


def load(path) -> dict[str, SynthDataset]:
    """Read a dataset directory; returns datasets keyed ``"<domain>/<split>"``."""
    root = Path(path)
    manifest = root / "manifest.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"{root}: no manifest.txt")
    lines = manifest.read_text().splitlines()
    if not lines or not lines[0].startswith(f"# {MANIFEST_TAG}"):
        raise ValueError(f"{manifest}: corrupt header line")
    meta = dict(tok.split("=", 1) for tok in lines[0][len(f"# {MANIFEST_TAG}"):].split())
    count = int(meta["count"])
    num_classes = int(meta["classes"])
    rows = [ln.split(",") for ln in lines[1:] if ln.strip()]
    if len(rows) != count:
        raise ValueError(f"{manifest}: header declares {count} images, found {len(rows)} entries")
    groups: dict[str, list] = {}
    for row in rows:
        if len(row) != 4:
            raise ValueError(f"{manifest}: malformed entry {','.join(row)!r}")
        ident, fname, domain, split = row
        img, lab = _read_blob(root / fname)
        if lab.size and lab.max() >= num_classes:
            raise ValueError(f"{root / fname}: label {lab.max()} outside [0, {num_classes})")
        groups.setdefault(f"{domain}/{split}", []).append((ident, img, lab))
    out = {}
    for key, items in groups.items():
        domain, split = key.split("/")
        out[key] = SynthDataset(
            np.stack([it[1] for it in items]),
            np.stack([it[2] for it in items]),
            domain, split, num_classes, [it[0] for it in items],
        )
    return out


def load_benchmark(path) -> Benchmark:
    sets = load(path)
    try:
        return Benchmark(sets["source/train"], sets["target/train"], sets["target/val"])
    except KeyError as exc:
        raise ValueError(f"{path}: missing split {exc.args[0]}") from None
