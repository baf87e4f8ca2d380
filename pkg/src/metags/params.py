"""Named trainable tensors with seeded, order-independent initialization."""
from __future__ import annotations

import hashlib
import json
import logging
import zlib
from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import Tensor

log = logging.getLogger(__name__)


@dataclass
class ModelConfig:
    d_h: int = 64  # projected feature width, also |z_ov|
    d_gv: int = 64
    d_att: int = 64  # hidden width of the type-level attention
    hops: int = 2
    n_type_max: int = 6
    l_max: int = 6
    hyper_layers: int = 2
    theta_ho: float = 0.75
    theta_he: float = 0.15
    variant: str = "full"
    seed: int = 0

    @property
    def d_max(self) -> int:
        return self.l_max + 2

    @property
    def d_struct(self) -> int:
        return self.d_max + self.n_type_max + 1

    @property
    def use_ov(self) -> bool:
        return self.variant != "no-ov"

    @property
    def use_gv(self) -> bool:
        return self.variant != "no-gv"

    @property
    def use_hyper(self) -> bool:
        return self.variant != "no-hyper"

    @property
    def d_z(self) -> int:
        return self.d_h * self.use_ov + self.d_gv * self.use_gv

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


def _uniform(name: str, seed: int, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    rng = np.random.default_rng([int(seed), zlib.crc32(name.encode())])
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class ModelParams:
    """Registry ``name -> Tensor``.

    Each tensor's initial value depends only on ``(seed, name)``, so lazily
    created projections come out identical whatever the creation order.
    """

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.tensors: dict[str, Tensor] = {}
        c = cfg
        for k in range(1, c.n_type_max + 1):
            self._make(f"ovgc.a.{k}", (2 * c.d_h,), 2 * c.d_h)
        self._make("ovgc.W_ov", (c.d_h, c.d_att), c.d_h)
        self._make("ovgc.b_ov", (c.d_att,), c.d_h)
        self._make("ovgc.a_ov", (c.d_att,), c.d_att)
        d_in = c.d_struct + c.d_h
        self._make("gvgc.l1.W_self", (d_in, c.d_h), d_in)
        self._make("gvgc.l1.W_neigh", (d_in, c.d_h), d_in)
        self._make("gvgc.l1.b", (c.d_h,), d_in)
        self._make("gvgc.l2.W_self", (c.d_h, c.d_h), c.d_h)
        self._make("gvgc.l2.W_neigh", (c.d_h, c.d_h), c.d_h)
        self._make("gvgc.l2.b", (c.d_h,), c.d_h)
        self._make("gvgc.W_gv", (c.d_h, c.d_gv), c.d_h)
        dz = c.d_z
        for l in range(c.hyper_layers):
            self._make(f"hyper.ho.{l}.a", (2 * dz,), 2 * dz)
            self._make(f"hyper.he.{l}.a", (2 * dz,), 2 * dz)

    def _make(self, name: str, shape: tuple[int, ...], fan_in: int) -> Tensor:
        t = Tensor(_uniform(name, self.cfg.seed, shape, fan_in), requires_grad=True, name=name)
        self.tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> list[str]:
        return sorted(self.tensors)

    def projection(self, slot: int, dim: int) -> Tensor:
        """``W`` for rank slot ``slot`` and raw feature width ``dim`` (created on first use)."""
        name = f"proj.W.{slot}.{dim}"
        t = self.tensors.get(name)
        if t is None:
            t = self._make(name, (dim, self.cfg.d_h), dim)
            log.info("initialized projection %s", name)
        return t

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        return {n: self.tensors[n].value.copy() for n in self.names()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for n, v in state.items():
            v = np.asarray(v, dtype=np.float64)
            t = self.tensors.get(n)
            if t is None:
                t = Tensor(v.copy(), requires_grad=True, name=n)
                self.tensors[n] = t
            elif t.shape != v.shape:
                raise ValueError(f"parameter {n}: shape {v.shape} does not match {t.shape}")
            t.value = v.copy()
            t.zero_grad()

    def digest(self, names: list[str] | None = None) -> str:
        h = hashlib.sha256()
        for n in self.names() if names is None else sorted(names):
            h.update(n.encode())
            h.update(np.ascontiguousarray(self.tensors[n].value).tobytes())
        return h.hexdigest()
