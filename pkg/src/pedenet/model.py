"""The three networks bundled with one flat parameter dictionary."""
from __future__ import annotations

import numpy as np

from pedenet.density import DeNetwork
from pedenet.location import LpNetwork
from pedenet.numerics import Tensor, no_grad
from pedenet.patch_embed import EMBED_DIM, PeNetwork, embed, param_count  # noqa: F401

GROUPS = ("pe", "de", "lp")


class PedeNet:
    def __init__(self, n_components: int = 5, embed_dim: int = EMBED_DIM, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.pe = PeNetwork(embed_dim=embed_dim)
        self.de = DeNetwork(n_components, embed_dim)
        self.lp = LpNetwork(embed_dim)
        self.params: dict[str, Tensor] = {}

    @classmethod
    def initialize(cls, seed: int, n_components: int = 5, dtype=np.float32) -> "PedeNet":
        model = cls(n_components, dtype=dtype)
        rng = np.random.default_rng(seed)
        for net in (model.pe, model.de, model.lp):
            for name, value in net.init(rng, model.dtype).items():
                model.params[name] = Tensor(value, requires_grad=True, name=name)
        return model

    @property
    def n_components(self) -> int:
        return self.de.n_components

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        for net in (self.pe, self.de, self.lp):
            shapes.update(net.param_shapes())
        return shapes

    def group(self, prefix: str) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith(prefix + ".")}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        expected = self.param_shapes()
        missing = set(expected) - set(arrays)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)[:5]}")
        for name, shape in expected.items():
            value = np.asarray(arrays[name], dtype=self.dtype)
            if value.shape != tuple(shape):
                raise ValueError(f"{name}: shape {value.shape}, expected {tuple(shape)}")
            self.params[name] = Tensor(value.copy(), requires_grad=True, name=name)

    def embed(self, patches) -> Tensor:
        if not isinstance(patches, Tensor):
            patches = Tensor(np.asarray(patches, dtype=self.dtype))
        return embed(self.pe, self.params, patches)

    def embed_numpy(self, patches: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Inference-only embedding of an (N, 3, 64, 64) array, in chunks."""
        out = []
        with no_grad():
            for start in range(0, len(patches), batch_size):
                out.append(self.embed(patches[start : start + batch_size]).data)
        if not out:
            return np.zeros((0, self.pe.embed_dim), dtype=self.dtype)
        return np.concatenate(out)
