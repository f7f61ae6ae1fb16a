"""Two-task segmentation samples: synthetic generation, on-disk loading, augmentation.

Dataset directory layout::

    root/
      dataset.meta            # "task <id> <name> <n_classes>" lines
      images/<stem>.png       # RGB
      masks_<name>/<stem>.png # single-channel 8-bit class indices, 255 = ignore

Without ``dataset.meta`` the mask folder of task ``t`` is ``masks_<t>``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DatasetError
from .numerics import bilinear_matrix, make_rng

IGNORE_INDEX = 255

SHAPES = ("background", "rectangle", "ellipse", "triangle", "diamond", "ring", "cross")
TEXTURES = ("solid", "striped", "checker", "noise", "grid", "dots")


@dataclass
class TaskSample:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    mask: np.ndarray  # (H, W) uint8 class indices or IGNORE_INDEX
    task_id: int
    name: str = ""

    def __post_init__(self):
        if self.image.shape[:2] != self.mask.shape:
            raise DatasetError(f"{self.name or 'sample'}: image {self.image.shape[:2]} "
                               f"and mask {self.mask.shape} differ in size")


@dataclass
class SyntheticSpec:
    n_images: int = 16
    image_size: int = 64
    min_shapes: int = 1
    max_shapes: int = 2
    object_classes: int = 5
    material_classes: int = 4
    seed: int = 0
    # shape extent as a fraction of the image side
    min_extent: float = 0.35
    max_extent: float = 0.6

    def __post_init__(self):
        if self.object_classes < 2 or self.material_classes < 2:
            raise ValueError("object and material class counts must both be >= 2")
        if self.object_classes > len(SHAPES):
            raise ValueError(f"at most {len(SHAPES)} object classes (background + shapes)")
        if self.material_classes > len(TEXTURES):
            raise ValueError(f"at most {len(TEXTURES)} material classes")
        if not 1 <= self.min_shapes <= self.max_shapes:
            raise ValueError("need 1 <= min_shapes <= max_shapes")


def _shape_mask(kind: str, yy, xx, cy, cx, ry, rx) -> np.ndarray:
    dy, dx = (yy - cy) / ry, (xx - cx) / rx
    if kind == "rectangle":
        return (np.abs(dy) <= 1) & (np.abs(dx) <= 1)
    if kind == "ellipse":
        return dy * dy + dx * dx <= 1
    if kind == "triangle":
        return (dy <= 1) & (dy >= -1) & (np.abs(dx) <= (dy + 1) / 2)
    if kind == "diamond":
        return np.abs(dy) + np.abs(dx) <= 1
    if kind == "ring":
        r2 = dy * dy + dx * dx
        return (r2 <= 1) & (r2 >= 0.3)
    if kind == "cross":
        return ((np.abs(dy) <= 1) & (np.abs(dx) <= 0.35)) | ((np.abs(dx) <= 1) & (np.abs(dy) <= 0.35))
    raise ValueError(kind)


def _texture(kind: str, size: int, rng) -> np.ndarray:
    """``(size, size, 3)`` fill pattern of two random colours."""
    a = rng.uniform(0.0, 1.0, 3)
    b = np.clip(1.0 - a + rng.uniform(-0.15, 0.15, 3), 0.0, 1.0)
    yy, xx = np.mgrid[0:size, 0:size]
    if kind == "solid":
        sel = np.zeros((size, size), dtype=bool)
    elif kind == "striped":
        sel = ((yy + xx) // 2) % 2 == 0
    elif kind == "checker":
        sel = ((yy // 2) + (xx // 2)) % 2 == 0
    elif kind == "noise":
        sel = rng.random((size, size)) < 0.5
    elif kind == "grid":
        sel = (yy % 4 == 0) | (xx % 4 == 0)
    elif kind == "dots":
        sel = (yy % 4 == 1) & (xx % 4 == 1)
    else:
        raise ValueError(kind)
    return np.where(sel[..., None], b, a)


def generate_synthetic(spec: SyntheticSpec) -> list:
    """Images of textured shapes on a textured background, one sample per task each.

    Task 0 labels the shape identity (0 is background), task 1 the fill
    texture. Samples alternate object/material for each image.
    """
    if spec.n_images < 1:
        raise DatasetError("synthetic dataset needs at least one image")
    rng = make_rng(spec.seed)
    s = spec.image_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    samples = []
    for i in range(spec.n_images):
        bg_tex = int(rng.integers(spec.material_classes))
        image = _texture(TEXTURES[bg_tex], s, rng)
        obj = np.zeros((s, s), dtype=np.uint8)
        mat = np.full((s, s), bg_tex, dtype=np.uint8)
        for _ in range(int(rng.integers(spec.min_shapes, spec.max_shapes + 1))):
            shape = int(rng.integers(1, spec.object_classes))
            tex = int(rng.integers(spec.material_classes))
            ry, rx = rng.uniform(spec.min_extent, spec.max_extent, 2) * s / 2
            cy, cx = rng.uniform(0.2 * s, 0.8 * s, 2)
            region = _shape_mask(SHAPES[shape], yy, xx, cy, cx, ry, rx)
            image = np.where(region[..., None], _texture(TEXTURES[tex], s, rng), image)
            obj[region] = shape
            mat[region] = tex
        image = image.astype(np.float32)
        name = f"synth_{i:04d}"
        samples.append(TaskSample(image, obj, 0, name))
        samples.append(TaskSample(image, mat, 1, name))
    return samples


# -- augmentation ------------------------------------------------------------

def nearest_indices(n_in: int, n_out: int) -> np.ndarray:
    return np.minimum(((np.arange(n_out) + 0.5) * n_in / n_out).astype(np.int64), n_in - 1)


def resize(sample: TaskSample, size_hw: tuple) -> TaskSample:
    """Bilinear image / nearest-neighbour mask resize."""
    h, w = sample.mask.shape
    nh, nw = size_hw
    if (nh, nw) == (h, w):
        return sample
    ry, rx = bilinear_matrix(h, nh), bilinear_matrix(w, nw)
    img = np.tensordot(ry, sample.image.astype(np.float64), axes=(1, 0))
    img = np.tensordot(img, rx, axes=(1, 1)).transpose(0, 2, 1).astype(np.float32)
    mask = sample.mask[nearest_indices(h, nh)][:, nearest_indices(w, nw)]
    return TaskSample(img, mask, sample.task_id, sample.name)


def hflip(sample: TaskSample) -> TaskSample:
    return TaskSample(sample.image[:, ::-1].copy(), sample.mask[:, ::-1].copy(), sample.task_id, sample.name)


def augment(sample: TaskSample, rng, crop: int, scale_range=(0.5, 2.0), flip_prob: float = 0.5,
            scale: float | None = None, flip: bool | None = None) -> TaskSample:
    """Random horizontal flip, random rescale, random crop to ``crop x crop``.

    Short sides are padded (image with 0, mask with the ignore label) before
    cropping. ``scale``/``flip`` override the random draws.
    """
    do_flip = rng.random() < flip_prob if flip is None else flip
    factor = rng.uniform(*scale_range) if scale is None else scale
    out = hflip(sample) if do_flip else sample
    h, w = out.mask.shape
    out = resize(out, (max(1, int(round(h * factor))), max(1, int(round(w * factor)))))
    h, w = out.mask.shape
    ph, pw = max(crop, h), max(crop, w)
    img = np.zeros((ph, pw, 3), dtype=np.float32)
    mask = np.full((ph, pw), IGNORE_INDEX, dtype=np.uint8)
    img[:h, :w] = out.image
    mask[:h, :w] = out.mask
    y0 = int(rng.integers(0, ph - crop + 1))
    x0 = int(rng.integers(0, pw - crop + 1))
    return TaskSample(img[y0:y0 + crop, x0:x0 + crop].copy(), mask[y0:y0 + crop, x0:x0 + crop].copy(),
                      sample.task_id, sample.name)


# -- disk I/O --------------------------------------------------------------

def read_meta(root) -> list:
    """``[(task_id, name, n_classes), ...]`` from ``dataset.meta``; empty when absent."""
    path = Path(root) / "dataset.meta"
    if not path.exists():
        return []
    tasks = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 4 or parts[0] != "task":
            raise DatasetError(f"{path}:{lineno}: expected 'task <id> <name> <n_classes>'")
        tasks.append((int(parts[1]), parts[2], int(parts[3])))
    return tasks


def write_meta(root, tasks) -> None:
    lines = ["# matevit dataset: task <id> <name> <n_classes>"]
    lines += [f"task {t} {name} {k}" for t, name, k in tasks]
    (Path(root) / "dataset.meta").write_text("\n".join(lines) + "\n")


def _mask_dir(root: Path, task_id: int) -> Path:
    for t, name, _ in read_meta(root):
        if t == task_id:
            return root / f"masks_{name}"
    return root / f"masks_{task_id}"


def load_dataset(root_dir, task_id: int, n_classes: int) -> list:
    """Pair ``images/*.png`` with the task's masks by filename stem."""
    root = Path(root_dir)
    images = sorted((root / "images").glob("*.png"))
    if not images:
        raise DatasetError(f"no images found under {root / 'images'}")
    mask_dir = _mask_dir(root, task_id)
    samples = []
    for img_path in images:
        mask_path = mask_dir / img_path.name
        if not mask_path.exists():
            raise DatasetError(f"missing mask for {img_path.name}: expected {mask_path}")
        image = np.asarray(Image.open(img_path).convert("RGB"), dtype=np.float32) / 255.0
        with Image.open(mask_path) as m:
            if m.mode not in ("L", "P"):
                raise DatasetError(f"{mask_path}: mask must be single-channel 8-bit, got mode {m.mode}")
            mask = np.asarray(m, dtype=np.uint8).copy()
        if mask.shape != image.shape[:2]:
            raise DatasetError(f"{mask_path}: mask {mask.shape} does not match image {image.shape[:2]}")
        bad = (mask >= n_classes) & (mask != IGNORE_INDEX)
        if bad.any():
            raise DatasetError(f"{mask_path}: label {int(mask[bad].max())} outside [0, {n_classes}) "
                               f"and not {IGNORE_INDEX}")
        samples.append(TaskSample(image, mask, task_id, img_path.stem))
    return samples


def save_dataset(samples, root_dir, tasks) -> Path:
    """Write samples in the directory layout; ``tasks`` is ``[(id, name, n_classes)]``."""
    root = Path(root_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    names = {t: name for t, name, _ in tasks}
    for t, name, _ in tasks:
        (root / f"masks_{name}").mkdir(exist_ok=True)
    write_meta(root, tasks)
    for s in samples:
        img_path = root / "images" / f"{s.name}.png"
        if not img_path.exists():
            Image.fromarray(np.round(s.image * 255).astype(np.uint8)).save(img_path)
        Image.fromarray(np.ascontiguousarray(s.mask, dtype=np.uint8)).save(root / f"masks_{names[s.task_id]}" / f"{s.name}.png")
    return root


def load_all(root_dir) -> tuple:
    """Every task declared in ``dataset.meta``: ``(samples, tasks)``."""
    tasks = read_meta(root_dir)
    if not tasks:
        raise DatasetError(f"{Path(root_dir) / 'dataset.meta'} missing or empty")
    samples = []
    for t, _, k in tasks:
        samples += load_dataset(root_dir, t, k)
    return samples, tasks
