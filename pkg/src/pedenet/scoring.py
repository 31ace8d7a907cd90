"""Nearest-neighbour anomaly scoring against a gallery of normal-patch embeddings."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from pedenet.ann import ExactIndex, RandomProjectionForest
from pedenet.checkpoint import read_container, write_container
from pedenet.errors import IncompatibleCheckpointError, InvalidArgumentError, PreconditionError
from pedenet.patch_embed import PATCH_SIZE

BACKENDS = ("exact", "approx")
AGGREGATIONS = ("mean", "max")
DEFAULT_STRIDE = 16


def grid_positions(extent: int, stride: int, patch: int = PATCH_SIZE) -> np.ndarray:
    """Top-left offsets 0, S, 2S, ... of patches that fit inside ``extent``."""
    if stride < 1:
        raise InvalidArgumentError("stride must be >= 1")
    if extent < patch:
        raise InvalidArgumentError(f"image extent {extent} smaller than patch {patch}")
    return np.arange(0, extent - patch + 1, stride)


def extract_grid_patches(image: np.ndarray, stride: int, patch: int = PATCH_SIZE) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """All stride-S patches of a (C, H, W) image, row-major: (patches, ys, xs)."""
    _, h, w = image.shape
    ys, xs = grid_positions(h, stride, patch), grid_positions(w, stride, patch)
    windows = np.lib.stride_tricks.sliding_window_view(image, (patch, patch), axis=(1, 2))
    sel = windows[:, ys][:, :, xs]  # (C, ny, nx, p, p)
    patches = np.ascontiguousarray(sel.transpose(1, 2, 0, 3, 4)).reshape(len(ys) * len(xs), image.shape[0], patch, patch)
    return patches, ys, xs


@dataclass
class EmbeddingGallery:
    embeddings: np.ndarray  # (M, Z)
    stride: int
    patch_size: int = PATCH_SIZE
    _indexes: dict[str, object] = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.embeddings)

    def index(self, backend: str = "exact"):
        if backend not in BACKENDS:
            raise InvalidArgumentError(f"backend must be one of {BACKENDS}")
        if len(self.embeddings) == 0:
            raise PreconditionError("gallery is empty")
        if backend not in self._indexes:
            if backend == "exact":
                self._indexes[backend] = ExactIndex(self.embeddings)
            else:
                self._indexes[backend] = RandomProjectionForest(self.embeddings)
        return self._indexes[backend]

    def extend(self, rows: np.ndarray) -> "EmbeddingGallery":
        """New gallery with extra rows appended (this one is left untouched)."""
        return EmbeddingGallery(np.concatenate([self.embeddings, rows]), self.stride, self.patch_size)


def build_gallery(model, train_images: list[np.ndarray], stride: int = DEFAULT_STRIDE, patch: int = PATCH_SIZE) -> EmbeddingGallery:
    """Embed every stride-S patch of every training image."""
    rows = []
    for image in train_images:
        patches, _, _ = extract_grid_patches(image, stride, patch)
        rows.append(model.embed_numpy(patches.astype(model.dtype, copy=False)))
    if not rows:
        return EmbeddingGallery(np.zeros((0, model.pe.embed_dim), dtype=model.dtype), stride, patch)
    return EmbeddingGallery(np.concatenate(rows), stride, patch)


def nearest_distances(queries: np.ndarray, gallery: EmbeddingGallery, backend: str = "exact") -> np.ndarray:
    """AS for each row of ``queries``: L2 distance to the closest gallery row."""
    return gallery.index(backend).query(queries)[0]


def nearest_distance(z: np.ndarray, gallery: EmbeddingGallery, backend: str = "exact") -> float:
    z = np.asarray(z)
    if z.ndim != 1:
        raise InvalidArgumentError("nearest_distance takes a single embedding")
    return float(nearest_distances(z[None], gallery, backend)[0])


@dataclass
class AnomalyMap:
    scores: np.ndarray  # (H, W), >= 0
    patch_scores: np.ndarray  # (ny, nx)
    coverage: np.ndarray  # (H, W) int, number of patches covering each pixel

    @property
    def image_score(self) -> float:
        return float(self.scores.max())


def aggregate_patch_scores(
    patch_scores: np.ndarray,
    ys: np.ndarray,
    xs: np.ndarray,
    shape: tuple[int, int],
    patch: int = PATCH_SIZE,
    aggregation: str = "mean",
) -> AnomalyMap:
    """Spread a (ny, nx) grid of patch scores onto pixels; uncovered pixels stay 0."""
    if aggregation not in AGGREGATIONS:
        raise InvalidArgumentError(f"aggregation must be one of {AGGREGATIONS}")
    acc = np.zeros(shape, dtype=np.float64)
    count = np.zeros(shape, dtype=np.int64)
    for i, y in enumerate(ys):
        for j, x in enumerate(xs):
            window = (slice(y, y + patch), slice(x, x + patch))
            if aggregation == "mean":
                acc[window] += patch_scores[i, j]
            else:
                np.maximum(acc[window], patch_scores[i, j], out=acc[window])
            count[window] += 1
    if aggregation == "mean":
        np.divide(acc, count, out=acc, where=count > 0)
    return AnomalyMap(acc, np.asarray(patch_scores, dtype=np.float64), count)


def anomaly_map(
    model,
    gallery: EmbeddingGallery,
    image: np.ndarray,
    stride: int | None = None,
    backend: str = "exact",
    aggregation: str = "mean",
) -> AnomalyMap:
    stride = gallery.stride if stride is None else stride
    patches, ys, xs = extract_grid_patches(image, stride, gallery.patch_size)
    z = model.embed_numpy(patches.astype(model.dtype, copy=False))
    scores = nearest_distances(z, gallery, backend).reshape(len(ys), len(xs))
    return aggregate_patch_scores(scores, ys, xs, image.shape[1:], gallery.patch_size, aggregation)


def save_gallery(gallery: EmbeddingGallery, path) -> None:
    meta = {"kind": "gallery", "stride": gallery.stride, "patch": gallery.patch_size}
    write_container(path, meta, {"gallery": gallery.embeddings})


def load_gallery(path) -> EmbeddingGallery:
    meta, tensors = read_container(path)
    if meta.get("kind") != "gallery" or "gallery" not in tensors:
        raise IncompatibleCheckpointError(f"{path}: not a gallery file")
    try:
        return EmbeddingGallery(tensors["gallery"], int(meta["stride"]), int(meta["patch"]))
    except (KeyError, ValueError) as exc:
        raise IncompatibleCheckpointError(f"{path}: {exc}") from exc
