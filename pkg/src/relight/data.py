"""Image I/O, one-to-one relighting dataset indexing and a synthetic scene renderer.

Dataset layout::

    root/<split>/<scene_id>/<direction>_<temperature>.png

with the input illumination tagged ``N_6500`` (light from the north, 6500K)
and the target ``E_4500`` (light from the east, 4500K).
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import tensor as T
from .tensor import Tensor

logger = logging.getLogger(__name__)

INPUT_TAG = "N_6500"
TARGET_TAG = "E_4500"

NEUTRAL_GAIN = (1.0, 1.0, 1.0)
WARM_GAIN = (1.0, 0.85, 0.65)
AMBIENT = 0.1
# angle of the light from the surface normal of a flat floor
LIGHT_POLAR_DEG = 45.0


class ImageError(Exception):
    pass


class MissingImageError(ImageError, FileNotFoundError):
    pass


class NotRGBError(ImageError):
    pass


class ImageDecodeError(ImageError):
    pass


class DatasetError(Exception):
    pass


# -- image I/O -------------------------------------------------------------

def load_image(path) -> Tensor:
    """Read an 8-bit RGB PNG as a (1, 3, H, W) tensor in [0, 1]."""
    path = Path(path)
    if not path.is_file():
        raise MissingImageError(f"no such image: {path}")
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            arr = np.asarray(im)
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageDecodeError(f"cannot decode {path}: {exc}") from exc
    if mode != "RGB":
        raise NotRGBError(f"{path}: expected 8-bit RGB, got mode {mode}")
    data = (arr.astype(np.float64) / 255.0).transpose(2, 0, 1)[None]
    return Tensor(np.ascontiguousarray(data, dtype=T.get_dtype()))


def to_uint8(x) -> np.ndarray:
    """(1,3,H,W) or (3,H,W) values -> (H,W,3) uint8 via clamp and round(v*255)."""
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise ValueError(f"expected a single image, got batch of {arr.shape[0]}")
        arr = arr[0]
    if arr.shape[0] != 3:
        raise ValueError(f"expected 3 channels, got {arr.shape[0]}")
    q = np.round(np.clip(arr.astype(np.float64), 0.0, 1.0) * 255.0)
    return q.astype(np.uint8).transpose(1, 2, 0)


def save_image(x, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(x), mode="RGB").save(path, format="PNG")


def resize_half(image: Tensor) -> Tensor:
    return T.downsample_avg2x(image)


# -- manifest --------------------------------------------------------------

@dataclass(frozen=True)
class SamplePair:
    input_path: Path
    target_path: Path
    scene_id: str


@dataclass
class Manifest:
    pairs: list
    split: str = ""
    root: Path = None
    skipped: int = 0

    def __len__(self):
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["scene_id", "input_path", "target_path"])
            for p in self.pairs:
                writer.writerow([p.scene_id, str(p.input_path), str(p.target_path)])

    @classmethod
    def from_csv(cls, path, split: str = "") -> "Manifest":
        """Read a ``scene_id,input_path,target_path`` table.

        Relative paths resolve against the CSV's directory, so a hand-written
        table can adapt any on-disk layout.
        """
        path = Path(path)
        base = path.parent
        pairs = []
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                pairs.append(SamplePair(base / row["input_path"], base / row["target_path"],
                                        row["scene_id"]))
        return _finish(pairs, split, base, 0)


def _finish(pairs, split, root, skipped) -> Manifest:
    pairs = sorted(pairs, key=lambda p: p.scene_id)
    ids = [p.scene_id for p in pairs]
    if len(set(ids)) != len(ids):
        raise DatasetError("duplicate scene ids in manifest")
    if not pairs:
        raise DatasetError(f"no input/target pairs found under {root}")
    return Manifest(pairs, split, root, skipped)


def scan_dataset(root, split: str = "train", input_tag: str = INPUT_TAG,
                 target_tag: str = TARGET_TAG, check_shapes: bool = True) -> Manifest:
    """Index every scene under ``root/split`` holding both tagged images."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root does not exist: {root}")
    split_dir = root / split
    pairs, skipped = [], 0
    if split_dir.is_dir():
        for scene in sorted(d for d in split_dir.iterdir() if d.is_dir()):
            inp = scene / f"{input_tag}.png"
            tgt = scene / f"{target_tag}.png"
            if inp.is_file() and tgt.is_file():
                pairs.append(SamplePair(inp, tgt, scene.name))
            else:
                skipped += 1
    if skipped:
        logger.warning("skipped %d incomplete scene(s) under %s", skipped, split_dir)
    manifest = _finish(pairs, split, root, skipped)
    if check_shapes:
        for p in manifest:
            a, b = _png_size(p.input_path), _png_size(p.target_path)
            if a != b:
                raise DatasetError(f"{p.scene_id}: input {a} and target {b} sizes differ")
    return manifest


def _png_size(path):
    with Image.open(path) as im:
        return im.size


def load_pairs(manifest: Manifest, half: bool = False) -> list:
    """Decode every pair to ``(scene_id, input, target)`` tensors."""
    out = []
    for p in manifest:
        a, b = load_image(p.input_path), load_image(p.target_path)
        if a.shape != b.shape:
            raise DatasetError(f"{p.scene_id}: input {a.shape} and target {b.shape} differ")
        if half:
            a, b = resize_half(a), resize_half(b)
        out.append((p.scene_id, a, b))
    return out


# -- synthetic scenes ------------------------------------------------------

@dataclass
class Scene:
    albedo: np.ndarray      # (H, W, 3) in [0, 1]
    normals: np.ndarray     # (H, W, 3) unit vectors, z towards the viewer
    shapes: list = field(default_factory=list)


def light_direction(azimuth: str, polar_deg: float = LIGHT_POLAR_DEG) -> np.ndarray:
    """Unit vector towards the light; x east (columns), y north (up the image), z out."""
    th = math.radians(polar_deg)
    horiz = {"N": (0.0, 1.0), "E": (1.0, 0.0), "S": (0.0, -1.0), "W": (-1.0, 0.0)}[azimuth]
    return np.array([math.sin(th) * horiz[0], math.sin(th) * horiz[1], math.cos(th)])


def normals_from_height(height: np.ndarray) -> np.ndarray:
    # rows grow southwards, so the northward slope is minus the row gradient
    d_row, d_col = np.gradient(height)
    n = np.stack([-d_col, d_row, np.ones_like(height)], axis=-1)
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


def random_scene(rng: np.random.Generator, size: int) -> Scene:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    albedo = np.empty((size, size, 3))
    albedo[:] = rng.uniform(0.3, 0.9, size=3)
    shapes = []
    for _ in range(int(rng.integers(4, 9))):
        color = rng.uniform(0.1, 1.0, size=3)
        if rng.random() < 0.5:
            x0, y0 = rng.uniform(0, size * 0.8, size=2)
            w, h = rng.uniform(size * 0.1, size * 0.5, size=2)
            mask = (xx >= x0) & (xx < x0 + w) & (yy >= y0) & (yy < y0 + h)
            shapes.append(("rect", x0, y0, w, h))
        else:
            cx, cy = rng.uniform(0, size, size=2)
            r = rng.uniform(size * 0.06, size * 0.25)
            mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
            shapes.append(("disk", cx, cy, r))
        albedo[mask] = color
    height = np.zeros((size, size))
    for _ in range(int(rng.integers(3, 7))):
        cx, cy = rng.uniform(0, size, size=2)
        s = rng.uniform(size * 0.08, size * 0.25)
        amp = rng.uniform(-1.0, 1.0) * s
        height += amp * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * s * s))
    return Scene(albedo, normals_from_height(height), shapes)


def shade(albedo: np.ndarray, normals: np.ndarray, light: np.ndarray, gain=NEUTRAL_GAIN) -> np.ndarray:
    """Lambertian shading plus a 0.1 ambient term, tinted by ``gain``, clamped to [0, 1]."""
    cos = np.maximum(0.0, normals @ light)[..., None]
    img = albedo * cos + AMBIENT * albedo
    return np.clip(img * np.asarray(gain), 0.0, 1.0)


def render(scene: Scene, azimuth: str, gain) -> np.ndarray:
    """(1, 3, H, W) float64 image of a scene lit from ``azimuth``."""
    img = shade(scene.albedo, scene.normals, light_direction(azimuth), gain)
    return img.transpose(2, 0, 1)[None]


def synth_generate(seed: int, n_scenes: int, size: int, root, split: str = "train") -> Manifest:
    """Write ``n_scenes`` input/target pairs under ``root/split`` and index them."""
    if size % 16 or size <= 0:
        raise ValueError(f"size must be a positive multiple of 16, got {size}")
    if n_scenes < 1:
        raise ValueError("n_scenes must be >= 1")
    rng = np.random.default_rng(seed)
    out = Path(root) / split
    width = max(4, len(str(n_scenes - 1)))
    for i in range(n_scenes):
        scene = random_scene(rng, size)
        scene_dir = out / f"scene{i:0{width}d}"
        save_image(render(scene, "N", NEUTRAL_GAIN), scene_dir / f"{INPUT_TAG}.png")
        save_image(render(scene, "E", WARM_GAIN), scene_dir / f"{TARGET_TAG}.png")
    return scan_dataset(root, split)
