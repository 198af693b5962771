"""Deterministic synthetic visible/infrared person dataset, P x K sampler and augmentations.

Each identity is a colored body layout (head, garment, trousers, shoes, optional
stripes and bag). Visible images are the layout plus jitter. Infrared images
replace every pixel by a material-dependent brightness: each palette color is a
"material" with its own thermal gain, so the visible color of a garment predicts
its infrared brightness without being recoverable from visible luminance.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from mipreid.errors import InsufficientImagesError
from mipreid.mpl import IR, VIS, MODALITY_NAMES

# garment palette (RGB in [0, 1]); background and skin are materials too
GARMENT_COLORS = np.array(
    [
        [0.85, 0.15, 0.15],  # red
        [0.15, 0.55, 0.20],  # green
        [0.15, 0.25, 0.80],  # blue
        [0.90, 0.80, 0.20],  # yellow
        [0.55, 0.25, 0.65],  # purple
        [0.95, 0.55, 0.15],  # orange
        [0.20, 0.70, 0.75],  # teal
        [0.92, 0.92, 0.92],  # white
        [0.12, 0.12, 0.12],  # black
        [0.55, 0.35, 0.20],  # brown
    ]
)
BACKGROUND_COLOR = np.array([0.45, 0.47, 0.50])
SKIN_COLOR = np.array([0.90, 0.72, 0.60])
MATERIAL_COLORS = np.vstack([GARMENT_COLORS, BACKGROUND_COLOR, SKIN_COLOR])
BACKGROUND, SKIN = len(GARMENT_COLORS), len(GARMENT_COLORS) + 1


@dataclass(frozen=True)
class SynthSpec:
    num_train_ids: int = 20
    num_test_ids: int = 10
    images_per_id_per_modality: int = 20
    image_height: int = 64
    image_width: int = 32
    channels: int = 3
    noise: float = 0.05
    max_shift: int = 3
    illumination: float = 0.15
    ir_gain_low: float = 0.15
    ir_gain_high: float = 0.95
    seed: int = 0

    @property
    def num_identities(self) -> int:
        return self.num_train_ids + self.num_test_ids

    def ir_gains(self) -> np.ndarray:
        """Thermal gain per material; background is cold and skin is warm."""
        # evenly spaced levels in a seeded order keep garments separable in infrared
        rng = np.random.default_rng([self.seed, 7])
        levels = np.linspace(self.ir_gain_low, self.ir_gain_high, len(GARMENT_COLORS))
        return np.concatenate([rng.permutation(levels), [0.05, 1.0]])


@dataclass(frozen=True)
class Identity:
    upper: int
    lower: int
    shoes: int
    stripe: int  # -1 for none
    bag: int  # -1 for none


def _draw_identities(spec: SynthSpec, rng: np.random.Generator) -> list[Identity]:
    seen: set[tuple[int, int, int, int]] = set()
    out = []
    ncol = len(GARMENT_COLORS)
    while len(out) < spec.num_identities:
        upper, lower = rng.choice(ncol, size=2, replace=False)
        stripe = int(rng.integers(ncol)) if rng.random() < 0.4 else -1
        bag = int(rng.integers(ncol)) if rng.random() < 0.4 else -1
        if stripe == upper:
            stripe = -1
        key = (int(upper), int(lower), stripe, bag)
        if key in seen:
            continue
        seen.add(key)
        out.append(Identity(int(upper), int(lower), int(rng.integers(ncol)), stripe, bag))
    return out


def material_map(identity: Identity, height: int = 64, width: int = 32) -> np.ndarray:
    """Per-pixel material index of the identity's base layout."""
    sy, sx = height / 64.0, width / 32.0

    def box(y0, y1, x0, x1):
        return slice(int(round(y0 * sy)), int(round(y1 * sy))), slice(int(round(x0 * sx)), int(round(x1 * sx)))

    m = np.full((height, width), BACKGROUND, dtype=np.int64)
    m[box(4, 13, 12, 20)] = SKIN
    m[box(13, 35, 8, 24)] = identity.upper
    m[box(15, 33, 5, 8)] = SKIN
    m[box(15, 33, 24, 27)] = SKIN
    if identity.stripe >= 0:
        for y0 in (17, 23, 29):
            m[box(y0, y0 + 3, 8, 24)] = identity.stripe
    m[box(35, 58, 9, 15)] = identity.lower
    m[box(35, 58, 17, 23)] = identity.lower
    m[box(58, 62, 8, 15)] = identity.shoes
    m[box(58, 62, 17, 24)] = identity.shoes
    if identity.bag >= 0:
        m[box(24, 38, 24, 30)] = identity.bag
    return m


def base_image(identity: Identity, spec: SynthSpec) -> np.ndarray:
    """Visible base appearance, ``(C, H, W)`` float in [0, 1]."""
    materials = material_map(identity, spec.image_height, spec.image_width)
    img = MATERIAL_COLORS[materials].transpose(2, 0, 1)
    return _fit_channels(img, spec.channels)


def _fit_channels(img: np.ndarray, channels: int) -> np.ndarray:
    if channels == 3:
        return img
    gray = img.mean(axis=0, keepdims=True)
    return np.repeat(gray, channels, axis=0)


def ir_remap(base: np.ndarray, gains: np.ndarray) -> np.ndarray:
    """Channel-collapsed thermal image of a base appearance.

    Each pixel is assigned its nearest material color and replaced by that
    material's gain, modulated slightly by the pixel's own luminance.
    """
    if base.shape[0] == 3:
        dist = ((base.transpose(1, 2, 0)[:, :, None, :] - MATERIAL_COLORS[None, None]) ** 2).sum(-1)
        material = dist.argmin(-1)
    else:
        material = np.abs(base[0][:, :, None] - MATERIAL_COLORS.mean(1)[None, None]).argmin(-1)
    luminance = base.mean(axis=0)
    thermal = np.clip(gains[material] * (0.8 + 0.2 * luminance), 0.0, 1.0)
    return np.repeat(thermal[None], base.shape[0], axis=0)


def _jitter(img: np.ndarray, spec: SynthSpec, rng: np.random.Generator, illumination: bool = True) -> np.ndarray:
    out = img
    if spec.max_shift > 0:
        dy, dx = rng.integers(-spec.max_shift, spec.max_shift + 1, size=2)
        fill = out[:, :1, :1]
        shifted = np.broadcast_to(fill, out.shape).copy()
        h, w = out.shape[1:]
        ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
        xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
        shifted[:, yd, xd] = out[:, ys, xs]
        out = shifted
    if illumination and spec.illumination > 0:
        out = out * (1.0 + rng.uniform(-spec.illumination, spec.illumination))
    if spec.noise > 0:
        out = out + rng.normal(0.0, spec.noise, size=out.shape)
    return np.clip(out, 0.0, 1.0)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


@dataclass
class SynthDataset:
    """In-memory dataset; ``images`` are uint8 ``(n, C, H, W)``."""

    images: np.ndarray
    identities: np.ndarray
    modalities: np.ndarray
    train_ids: list[int]
    test_ids: list[int]
    spec: SynthSpec | None = None
    filenames: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.images)

    def indices(self, identity: int, modality: int) -> np.ndarray:
        return np.flatnonzero((self.identities == identity) & (self.modalities == modality))

    def select(self, ids, modality: int | None = None) -> np.ndarray:
        mask = np.isin(self.identities, list(ids))
        if modality is not None:
            mask &= self.modalities == modality
        return np.flatnonzero(mask)

    def tensor(self, indices) -> torch.Tensor:
        return torch.from_numpy(self.images[np.asarray(indices)].astype(np.float32) / 255.0)

    def save(self, root: str | Path) -> Path:
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        split = {i: "train" for i in self.train_ids} | {i: "test" for i in self.test_ids}
        counters: dict[tuple[int, int], int] = {}
        rows = []
        for idx in range(len(self)):
            ident, mod = int(self.identities[idx]), int(self.modalities[idx])
            n = counters.get((ident, mod), 0)
            counters[(ident, mod)] = n + 1
            rel = f"id_{ident:04d}/{MODALITY_NAMES[mod]}_{n:04d}.png"
            path = root / rel
            path.parent.mkdir(exist_ok=True)
            pixels = self.images[idx]
            if mod == IR:
                Image.fromarray(pixels[0], mode="L").save(path)
            elif pixels.shape[0] == 3:
                Image.fromarray(pixels.transpose(1, 2, 0), mode="RGB").save(path)
            else:
                Image.fromarray(pixels[0], mode="L").save(path)
            rows.append((ident, MODALITY_NAMES[mod], rel, split[ident]))
        with open(root / "manifest.csv", "w", newline="") as fh:
            if self.spec is not None:
                fh.write(f"# spec={json.dumps(dataclasses.asdict(self.spec), sort_keys=True)}\n")
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["id", "modality", "filename", "split"])
            writer.writerows(rows)
        return root

    @classmethod
    def load(cls, root: str | Path, channels: int = 3) -> "SynthDataset":
        """Read any directory described by a ``id,modality,filename,split`` manifest."""
        root = Path(root)
        spec = None
        lines = []
        for line in (root / "manifest.csv").read_text().splitlines():
            if line.startswith("# spec="):
                spec = SynthSpec(**json.loads(line[len("# spec="):]))
            elif line and not line.startswith("#"):
                lines.append(line)
        reader = csv.DictReader(lines)
        images, identities, modalities, names = [], [], [], []
        train, test = set(), set()
        by_name = {v: k for k, v in MODALITY_NAMES.items()}
        for row in reader:
            ident = int(row["id"])
            mod = by_name[row["modality"]]
            pic = np.asarray(Image.open(root / row["filename"]))
            if pic.ndim == 2:
                pic = np.repeat(pic[None], channels, axis=0)
            else:
                pic = pic.transpose(2, 0, 1)
            images.append(pic)
            identities.append(ident)
            modalities.append(mod)
            names.append(row["filename"])
            (train if row["split"] == "train" else test).add(ident)
        return cls(
            np.stack(images),
            np.array(identities),
            np.array(modalities),
            sorted(train),
            sorted(test),
            spec,
            names,
        )


def generate_dataset(spec: SynthSpec) -> SynthDataset:
    rng = np.random.default_rng([spec.seed, 0])
    people = _draw_identities(spec, rng)
    order = rng.permutation(spec.num_identities)
    train_ids = sorted(int(i) for i in order[: spec.num_train_ids])
    test_ids = sorted(int(i) for i in order[spec.num_train_ids:])
    gains = spec.ir_gains()
    images, identities, modalities = [], [], []
    for ident, person in enumerate(people):
        base = base_image(person, spec)
        thermal = ir_remap(base, gains)
        for mod, source in ((VIS, base), (IR, thermal)):
            for n in range(spec.images_per_id_per_modality):
                img_rng = np.random.default_rng([spec.seed, 1, ident, mod, n])
                if mod == IR:
                    # thermal images are single-plane and unaffected by scene lighting
                    plane = _jitter(source[:1], spec, img_rng, illumination=False)
                    images.append(to_uint8(np.repeat(plane, source.shape[0], axis=0)))
                else:
                    images.append(to_uint8(_jitter(source, spec, img_rng)))
                identities.append(ident)
                modalities.append(mod)
    return SynthDataset(np.stack(images), np.array(identities), np.array(modalities), train_ids, test_ids, spec)


@dataclass
class BatchPlan:
    person_ids: list[int]
    vis_indices: list[list[int]]
    ir_indices: list[list[int]]

    @property
    def indices(self) -> list[int]:
        out = []
        for vis, ir in zip(self.vis_indices, self.ir_indices):
            out.extend(vis)
            out.extend(ir)
        return out

    def __len__(self) -> int:
        return len(self.indices)


def sample_batch(
    dataset: SynthDataset,
    persons: int,
    k_vis: int,
    k_ir: int,
    rng: np.random.Generator,
    identities=None,
) -> BatchPlan:
    """Pick ``persons`` distinct identities and ``k_vis`` + ``k_ir`` images of each."""
    pool = np.asarray(sorted(identities if identities is not None else dataset.train_ids))
    if persons > len(pool):
        raise InsufficientImagesError(f"need {persons} identities, only {len(pool)} available")
    chosen = rng.choice(pool, size=persons, replace=False)
    vis_plan, ir_plan = [], []
    for ident in chosen:
        for mod, k, plan in ((VIS, k_vis, vis_plan), (IR, k_ir, ir_plan)):
            available = dataset.indices(int(ident), mod)
            if len(available) < k:
                raise InsufficientImagesError(
                    f"identity {ident} has {len(available)} {MODALITY_NAMES[mod]} images, need {k}"
                )
            plan.append([int(i) for i in rng.choice(available, size=k, replace=False)])
    return BatchPlan([int(i) for i in chosen], vis_plan, ir_plan)


@dataclass(frozen=True)
class AugmentFlags:
    crop: bool = True
    jitter: bool = True
    erase: bool = True
    grayscale: bool = True
    crop_pad: int = 4
    p_crop: float = 1.0
    p_jitter: float = 0.5
    p_erase: float = 0.5
    p_grayscale: float = 0.1
    erase_area: tuple[float, float] = (0.02, 0.2)
    erase_fill: float = 0.5

    @classmethod
    def off(cls) -> "AugmentFlags":
        return cls(crop=False, jitter=False, erase=False, grayscale=False)


def random_crop(img: np.ndarray, pad: int, rng: np.random.Generator) -> np.ndarray:
    _, h, w = img.shape
    padded = np.pad(img, ((0, 0), (pad, pad), (pad, pad)), mode="constant")
    y, x = rng.integers(0, 2 * pad + 1, size=2)
    return padded[:, y : y + h, x : x + w]


def color_jitter(img: np.ndarray, rng: np.random.Generator, strength: float = 0.2) -> np.ndarray:
    brightness, contrast, saturation = rng.uniform(1 - strength, 1 + strength, size=3)
    out = img * brightness
    out = (out - out.mean()) * contrast + out.mean()
    gray = out.mean(axis=0, keepdims=True)
    out = gray + (out - gray) * saturation
    return out


def to_grayscale(img: np.ndarray) -> np.ndarray:
    if img.shape[0] == 3:
        gray = 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]
    else:
        gray = img.mean(axis=0)
    return np.repeat(gray[None], img.shape[0], axis=0)


def erase_box(shape: tuple[int, int], area: tuple[float, float], rng: np.random.Generator):
    """Sample a rectangle covering a fraction of the image within ``area``."""
    h, w = shape
    for _ in range(100):
        target = rng.uniform(*area) * h * w
        aspect = np.exp(rng.uniform(np.log(0.3), np.log(1 / 0.3)))
        eh = int(round(np.sqrt(target * aspect)))
        ew = int(round(np.sqrt(target / aspect)))
        if 0 < eh <= h and 0 < ew <= w and area[0] <= eh * ew / (h * w) <= area[1]:
            y = int(rng.integers(0, h - eh + 1))
            x = int(rng.integers(0, w - ew + 1))
            return y, x, eh, ew
    return None


def augment(img: np.ndarray, rng: np.random.Generator, flags: AugmentFlags = AugmentFlags()) -> np.ndarray:
    """Training-time augmentation of a float ``(C, H, W)`` image in [0, 1]."""
    out = img.astype(np.float64, copy=True)
    if flags.crop and rng.random() < flags.p_crop:
        out = random_crop(out, flags.crop_pad, rng)
    if flags.jitter and rng.random() < flags.p_jitter:
        out = np.clip(color_jitter(out, rng), 0.0, 1.0)
    if flags.grayscale and rng.random() < flags.p_grayscale:
        out = to_grayscale(out)
    if flags.erase and rng.random() < flags.p_erase:
        box = erase_box(out.shape[1:], flags.erase_area, rng)
        if box is not None:
            y, x, eh, ew = box
            out[:, y : y + eh, x : x + ew] = flags.erase_fill
    return np.clip(out, 0.0, 1.0).astype(img.dtype)


def image_rng(seed: int, step: int, index: int) -> np.random.Generator:
    """Per-image augmentation stream so batch assembly order never changes results."""
    return np.random.default_rng([seed, 2, step, index])


def load_batch(
    dataset: SynthDataset,
    plan: BatchPlan,
    seed: int,
    step: int,
    train: bool = True,
    flags: AugmentFlags = AugmentFlags(),
):
    """Materialize a plan as ``(images, labels, modalities)`` tensors."""
    indices = plan.indices
    raw = dataset.images[np.asarray(indices)].astype(np.float32) / 255.0
    if train:
        raw = np.stack([augment(raw[n], image_rng(seed, step, idx), flags) for n, idx in enumerate(indices)])
    images = torch.from_numpy(np.ascontiguousarray(raw))
    labels = torch.as_tensor(dataset.identities[indices], dtype=torch.long)
    modalities = torch.as_tensor(dataset.modalities[indices], dtype=torch.long)
    return images, labels, modalities
