"""Named trainable parameters with explicit storage sharing."""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Callable, Iterator, Optional

import numpy as np

from film.autodiff import Tensor


@dataclass
class Parameter:
    """A named binding to a trainable tensor.

    Two parameters with the same ``sharing_key`` hold the very same
    :class:`Tensor`, so writes through one are visible through the other.
    """

    name: str
    tensor: Tensor
    sharing_key: str

    @property
    def shape(self) -> tuple[int, ...]:
        return self.tensor.shape


def he_normal(shape, rng: np.random.Generator, slope: float = 0.2, gain: float = 1.0) -> np.ndarray:
    fan_in = int(np.prod(shape[:-1]))
    std = gain * np.sqrt(2.0 / ((1.0 + slope ** 2) * fan_in))
    return rng.standard_normal(shape) * std


class ParameterStore:
    """Parameters keyed by use-site name, backed by storages keyed by sharing key."""

    def __init__(self, seed: int = 0, dtype=np.float32):
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Parameter] = {}
        self._storage: dict[str, Tensor] = {}
        # when set, asking for a storage that does not exist is an error
        self.frozen = False

    def get(
        self,
        name: str,
        shape: tuple[int, ...],
        sharing_key: Optional[str] = None,
        init: str | Callable[[tuple, np.random.Generator], np.ndarray] = "he",
    ) -> Tensor:
        """Return the tensor bound to ``name``, creating storage on first use."""
        key = sharing_key or name
        if name in self._params:
            p = self._params[name]
            if p.sharing_key != key:
                raise ValueError(f"{name} already bound to {p.sharing_key}, not {key}")
            return p.tensor
        storage = self._storage.get(key)
        if storage is None:
            if self.frozen:
                raise KeyError(f"missing parameter storage {key} (requested by {name})")
            # seeded by key so creation order cannot change initial values
            rng = np.random.default_rng([self.seed, zlib.crc32(key.encode())])
            if callable(init):
                data = init(shape, rng)
            elif init == "he":
                data = he_normal(shape, rng)
            elif init == "zeros":
                data = np.zeros(shape)
            else:
                raise ValueError(f"unknown init {init!r}")
            storage = Tensor(np.asarray(data, dtype=self.dtype), requires_grad=True)
            self._storage[key] = storage
        elif storage.shape != tuple(shape):
            raise ValueError(f"sharing key {key} has shape {storage.shape}, requested {tuple(shape)}")
        self._params[name] = Parameter(name, storage, key)
        return storage

    def __getitem__(self, name: str) -> Parameter:
        try:
            return self._params[name]
        except KeyError:
            raise KeyError(f"missing parameter {name}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def storages(self) -> dict[str, Tensor]:
        """Distinct storages by sharing key, sorted by key."""
        return {k: self._storage[k] for k in sorted(self._storage)}

    def census(self, prefix: str = "") -> int:
        """Number of distinct storages whose key starts with ``prefix``."""
        return sum(1 for k in self._storage if k.startswith(prefix))

    def size(self, prefix: str = "") -> int:
        """Total scalar count over distinct storages under ``prefix``."""
        return sum(t.size for k, t in self._storage.items() if k.startswith(prefix))

    def aliases(self, sharing_key: str) -> list[str]:
        return [p.name for p in self._params.values() if p.sharing_key == sharing_key]

    def zero_grad(self) -> None:
        for t in self._storage.values():
            t.grad = None

    def load_storage(self, key: str, values: np.ndarray) -> None:
        """Overwrite (or create) the storage for ``key`` in place."""
        values = np.asarray(values, dtype=self.dtype)
        if key in self._storage:
            t = self._storage[key]
            if t.shape != values.shape:
                raise ValueError(f"{key}: shape {values.shape} does not match {t.shape}")
            t.data[...] = values
        else:
            self._storage[key] = Tensor(values.copy(), requires_grad=True)

    def astype(self, dtype) -> "ParameterStore":
        """Copy with every storage converted to ``dtype``; sharing is preserved."""
        other = ParameterStore(self.seed, dtype)
        for key, t in self._storage.items():
            other._storage[key] = Tensor(t.data.astype(dtype), requires_grad=True)
        for name, p in self._params.items():
            other._params[name] = Parameter(name, other._storage[p.sharing_key], p.sharing_key)
        return other
