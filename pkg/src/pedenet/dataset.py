"""MVTec-layout class loading, patch sampling and a synthetic texture class."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from pedenet.errors import CorruptDatasetError, DatasetNotFoundError, InvalidArgumentError

IMAGE_SIZE = 256
PATCH_SIZE = 64
DEFAULT_JITTER = 8

# Row-major scan of the 3x3 grid around the anchor, centre excluded.
NEIGHBOR_OFFSETS: tuple[tuple[int, int], ...] = (
    (-1, -1), (-1, 0), (-1, 1),
    (0, -1),           (0, 1),
    (1, -1),  (1, 0),  (1, 1),
)
_OFFSET_INDEX = {d: i for i, d in enumerate(NEIGHBOR_OFFSETS)}
_IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


@dataclass
class TestSample:
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    mask: np.ndarray  # (H, W) uint8 in {0, 1}
    label: int
    name: str = ""


@dataclass
class ClassDataset:
    class_name: str
    train_images: list[np.ndarray]
    test_images: list[TestSample] = field(default_factory=list)

    @property
    def test_labels(self) -> list[int]:
        return [s.label for s in self.test_images]


@dataclass
class PatchPair:
    patch_a: np.ndarray
    patch_b: np.ndarray
    location_label: np.ndarray  # one-hot, length 8
    coords_a: tuple[int, int] = (0, 0)
    coords_b: tuple[int, int] = (0, 0)

    @property
    def label_index(self) -> int:
        return int(np.argmax(self.location_label))


def offset_to_label(dy: int, dx: int) -> int:
    try:
        return _OFFSET_INDEX[(dy, dx)]
    except KeyError:
        raise InvalidArgumentError(f"({dy}, {dx}) is not one of the eight neighbours") from None


def label_to_offset(label: int) -> tuple[int, int]:
    return NEIGHBOR_OFFSETS[label]


def one_hot(index: int, n: int = 8) -> np.ndarray:
    v = np.zeros(n, dtype=np.float32)
    v[index] = 1.0
    return v


# -- image I/O -------------------------------------------------------------

def read_image(path: Path, size: int = IMAGE_SIZE) -> np.ndarray:
    """Decode to (3, size, size) float32 in [0, 1]; grayscale is replicated to 3 channels."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        if im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def read_mask(path: Path, size: int = IMAGE_SIZE) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("L")
        if im.size != (size, size):
            im = im.resize((size, size), Image.NEAREST)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return (arr >= 0.5).astype(np.uint8)


def to_uint8(image: np.ndarray) -> np.ndarray:
    """(3, H, W) float in [0,1] -> (H, W, 3) uint8."""
    return np.clip(np.rint(image.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)


def write_image(path: Path, image: np.ndarray) -> None:
    Image.fromarray(to_uint8(image), mode="RGB").save(path, format="PNG")


def write_mask(path: Path, mask: np.ndarray) -> None:
    Image.fromarray((mask > 0).astype(np.uint8) * 255, mode="L").save(path, format="PNG")


def _list_images(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in _IMAGE_SUFFIXES and not p.stem.endswith("_mask"))


def load_class(root_path, class_name: str, size: int = IMAGE_SIZE) -> ClassDataset:
    """Load ``<root>/<class>`` laid out as in MVTec AD."""
    base = Path(root_path) / class_name
    train_dir = base / "train" / "good"
    test_dir = base / "test"
    if not train_dir.is_dir() or not test_dir.is_dir():
        raise DatasetNotFoundError(f"no MVTec class at {base} (need train/good and test/)")

    train = [read_image(p, size) for p in _list_images(train_dir)]
    if not train:
        raise CorruptDatasetError(f"{train_dir} contains no images")

    tests: list[TestSample] = []
    defect_dirs = sorted(d for d in test_dir.iterdir() if d.is_dir())
    # good first so that labels come out as [0, ..., 1, ...]
    defect_dirs.sort(key=lambda d: d.name != "good")
    for d in defect_dirs:
        images = _list_images(d)
        if d.name == "good":
            for p in images:
                img = read_image(p, size)
                tests.append(TestSample(img, np.zeros((size, size), dtype=np.uint8), 0, f"good/{p.name}"))
            continue
        gt_dir = base / "ground_truth" / d.name
        masks = sorted(gt_dir.glob("*_mask.*")) if gt_dir.is_dir() else []
        if len(masks) != len(images):
            raise CorruptDatasetError(f"{d} has {len(images)} images but {gt_dir} has {len(masks)} masks")
        for p in images:
            mpath = gt_dir / f"{p.stem}_mask.png"
            if not mpath.exists():
                candidates = list(gt_dir.glob(f"{p.stem}_mask.*"))
                if not candidates:
                    raise CorruptDatasetError(f"missing mask for {p}")
                mpath = candidates[0]
            mask = read_mask(mpath, size)
            tests.append(TestSample(read_image(p, size), mask, int(mask.any()), f"{d.name}/{p.name}"))
    return ClassDataset(class_name, train, tests)


# -- patch sampling --------------------------------------------------------

def sample_patch(image: np.ndarray, size: int = PATCH_SIZE, rng: np.random.Generator | None = None):
    """Uniformly placed ``size`` x ``size`` crop; returns (patch, (top, left))."""
    rng = rng or np.random.default_rng()
    _, h, w = image.shape
    if size > h or size > w:
        raise InvalidArgumentError(f"patch size {size} exceeds image {h}x{w}")
    y = int(rng.integers(0, h - size + 1))
    x = int(rng.integers(0, w - size + 1))
    return image[:, y : y + size, x : x + size], (y, x)


def sample_neighbor_pair(
    image: np.ndarray,
    size: int = PATCH_SIZE,
    jitter: int = DEFAULT_JITTER,
    rng: np.random.Generator | None = None,
) -> PatchPair:
    """Anchor patch plus one of its eight grid neighbours, position-jittered."""
    rng = rng or np.random.default_rng()
    _, h, w = image.shape
    if h < 2 * size + jitter or w < 2 * size + jitter:
        raise InvalidArgumentError(f"image {h}x{w} too small for neighbour pairs of size {size} with jitter {jitter}")
    label = int(rng.integers(0, 8))
    dy, dx = NEIGHBOR_OFFSETS[label]
    jy, jx = (int(v) for v in rng.integers(-jitter, jitter + 1, size=2))
    oy, ox = dy * size + jy, dx * size + jx
    y = int(rng.integers(max(0, -oy), min(h - size, h - size - oy) + 1))
    x = int(rng.integers(max(0, -ox), min(w - size, w - size - ox) + 1))
    return PatchPair(
        image[:, y : y + size, x : x + size],
        image[:, y + oy : y + oy + size, x + ox : x + ox + size],
        one_hot(label),
        (y, x),
        (y + oy, x + ox),
    )


def sample_patch_batch(images: list[np.ndarray], n: int, rng: np.random.Generator, size: int = PATCH_SIZE) -> np.ndarray:
    idx = rng.integers(0, len(images), size=n)
    return np.stack([sample_patch(images[i], size, rng)[0] for i in idx])


def sample_pair_batch(
    images: list[np.ndarray], n: int, rng: np.random.Generator, jitter: int = DEFAULT_JITTER, size: int = PATCH_SIZE
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (patches_a, patches_b, integer labels)."""
    idx = rng.integers(0, len(images), size=n)
    pairs = [sample_neighbor_pair(images[i], size, jitter, rng) for i in idx]
    return (
        np.stack([p.patch_a for p in pairs]),
        np.stack([p.patch_b for p in pairs]),
        np.array([p.label_index for p in pairs], dtype=np.int64),
    )


# -- synthetic class -------------------------------------------------------

MIN_DEFECT_FRACTION = 0.006
MAX_DEFECT_FRACTION = 0.055


def _texture_params(rng: np.random.Generator) -> dict:
    n_gratings = int(rng.integers(2, 4))
    # two slow gratings (period 2.5-3 image widths, fixed phase, monotone over
    # the image) roughly along x and y act as class-wide shading, each tinting a
    # different dominant channel, so a patch's colour drifts with its position
    shade_theta = np.array([0.0, np.pi / 2]) + rng.uniform(-np.pi / 9, np.pi / 9, size=2)
    shade_color = 0.2 + 0.8 * np.eye(3)[rng.choice(3, size=2, replace=False)]
    return {
        "freq": rng.uniform(1 / 28, 1 / 12, size=n_gratings),
        "theta": rng.uniform(0, np.pi, size=n_gratings),
        "amp": rng.uniform(0.06, 0.12, size=n_gratings),
        "color": rng.uniform(0.4, 1.0, size=(n_gratings, 3)),
        "shade_freq": rng.uniform(1 / 768, 1 / 640, size=2),
        "shade_theta": shade_theta,
        "shade_phase": rng.uniform(-np.pi / 8, np.pi / 8, size=2) + np.pi / 2,
        "shade_amp": rng.uniform(0.2, 0.25, size=2),
        "shade_color": shade_color,
        "base": rng.uniform(0.4, 0.6, size=3),
        "noise": 0.02,
    }


def _grating(freq: float, theta: float, phase: float, xx: np.ndarray, yy: np.ndarray) -> np.ndarray:
    return np.cos(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)


def _render_texture(params: dict, rng: np.random.Generator, size: int = IMAGE_SIZE) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.broadcast_to(params["base"][:, None, None], (3, size, size)).copy()
    for f, th, a, col in zip(params["freq"], params["theta"], params["amp"], params["color"]):
        img += col[:, None, None] * (a * _grating(f, th, rng.uniform(0, 2 * np.pi), xx, yy))
    centred_x, centred_y = xx - size / 2, yy - size / 2
    for f, th, ph, a, col in zip(params["shade_freq"], params["shade_theta"], params["shade_phase"],
                                 params["shade_amp"], params["shade_color"]):
        img += col[:, None, None] * (a * _grating(f, th, ph, centred_x, centred_y))
    img += rng.normal(0.0, params["noise"], size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _defect_mask(rng: np.random.Generator, size: int = IMAGE_SIZE) -> np.ndarray:
    area = size * size
    while True:
        h, w = (int(v) for v in rng.integers(20, 61, size=2))
        top = int(rng.integers(0, size - h + 1))
        left = int(rng.integers(0, size - w + 1))
        mask = np.zeros((size, size), dtype=np.uint8)
        if rng.random() < 0.5:
            mask[top : top + h, left : left + w] = 1
        else:
            yy, xx = np.mgrid[0:h, 0:w]
            cy, cx = (h - 1) / 2, (w - 1) / 2
            inside = ((yy - cy) / (h / 2)) ** 2 + ((xx - cx) / (w / 2)) ** 2 <= 1.0
            mask[top : top + h, left : left + w] = inside
        frac = mask.sum() / area
        if MIN_DEFECT_FRACTION <= frac <= MAX_DEFECT_FRACTION:
            return mask


def _apply_defect(img: np.ndarray, mask: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    out = img.copy()
    ys, xs = np.nonzero(mask)
    if rng.random() < 0.5:
        perm = rng.permutation(len(ys))
        out[:, ys, xs] = img[:, ys[perm], xs[perm]]
    else:
        out[:, ys, xs] = 1.0 - img[:, ys, xs]
    return out


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(img, 0, 1) * 255.0).astype(np.float32) / 255.0


def generate_synthetic_class(
    root, seed: int = 7, n_train: int = 20, n_test: int = 20, class_name: str = "synthetic"
) -> ClassDataset:
    """Write a quasi-periodic texture class in MVTec layout under ``<root>/<class_name>``.

    Each image sums 2-3 gratings (random phase per image) with two slow
    fixed-phase gratings that shade the class like a lit surface, plus noise.
    Half of the test images (rounded down) carry one rectangular or
    elliptical defect made of shuffled or contrast-inverted pixels.
    """
    if n_train < 10 or n_test < 10:
        raise InvalidArgumentError("n_train and n_test must both be >= 10")
    rng = np.random.default_rng(seed)
    params = _texture_params(rng)
    base = Path(root) / class_name
    dirs = {
        "train": base / "train" / "good",
        "good": base / "test" / "good",
        "defect": base / "test" / "defect",
        "gt": base / "ground_truth" / "defect",
    }
    for d in dirs.values():
        d.mkdir(parents=True, exist_ok=True)

    train = []
    for i in range(n_train):
        img = _quantize(_render_texture(params, rng))
        write_image(dirs["train"] / f"{i:03d}.png", img)
        train.append(img)

    n_defect = n_test // 2
    tests: list[TestSample] = []
    for i in range(n_test - n_defect):
        img = _quantize(_render_texture(params, rng))
        write_image(dirs["good"] / f"{i:03d}.png", img)
        tests.append(TestSample(img, np.zeros((IMAGE_SIZE, IMAGE_SIZE), dtype=np.uint8), 0, f"good/{i:03d}.png"))
    for i in range(n_defect):
        mask = _defect_mask(rng)
        img = _quantize(_apply_defect(_render_texture(params, rng), mask, rng))
        write_image(dirs["defect"] / f"{i:03d}.png", img)
        write_mask(dirs["gt"] / f"{i:03d}_mask.png", mask)
        tests.append(TestSample(img, mask, 1, f"defect/{i:03d}.png"))
    return ClassDataset(class_name, train, tests)
