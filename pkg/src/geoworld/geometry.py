"""Product latent spaces built from circles (R/kZ) and Euclidean blocks.

A :class:`LatentSpaceSpec` fixes which coordinate belongs to which factor.
Circular coordinates are always stored in the canonical range ``[0, k)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import _kernels
from .errors import ContractError, InvalidArgument

TWO_PI = 2.0 * math.pi

CIRCLE = "circle"
EUCLIDEAN = "euclidean"


@dataclass(frozen=True)
class FactorSpec:
    kind: str
    modulus: float = TWO_PI
    dim: int = 1

    def __post_init__(self):
        if self.kind == CIRCLE:
            if not (math.isfinite(self.modulus) and self.modulus > 0):
                raise InvalidArgument(f"circle modulus must be positive, got {self.modulus}")
            if self.dim != 1:
                raise InvalidArgument("a circle factor has dimension 1")
        elif self.kind == EUCLIDEAN:
            if int(self.dim) != self.dim or self.dim < 1:
                raise InvalidArgument(f"euclidean dim must be >= 1, got {self.dim}")
        else:
            raise InvalidArgument(f"unknown factor kind {self.kind!r}")


def Circle(modulus: float = TWO_PI) -> FactorSpec:
    return FactorSpec(CIRCLE, float(modulus), 1)


def Euclidean(dim: int = 1) -> FactorSpec:
    return FactorSpec(EUCLIDEAN, math.inf, int(dim))


class LatentSpaceSpec:
    """Ordered product of factors.

    ``moduli`` holds the circle modulus per coordinate (``inf`` on Euclidean
    coordinates) and ``circular`` is the matching boolean mask.
    """

    def __init__(self, factors: Iterable[FactorSpec]):
        self.factors = tuple(factors)
        if not self.factors:
            raise InvalidArgument("latent space needs at least one factor")
        moduli, circ = [], []
        for f in self.factors:
            for _ in range(f.dim):
                moduli.append(f.modulus if f.kind == CIRCLE else math.inf)
                circ.append(f.kind == CIRCLE)
        self.moduli = np.array(moduli, dtype=np.float64)
        self.circular = np.array(circ, dtype=bool)
        self.moduli.flags.writeable = False
        self.circular.flags.writeable = False
        # kernels ignore the modulus on euclidean columns; keep it finite there
        self._kmod = np.where(self.circular, self.moduli, 1.0)

    @property
    def total_dim(self) -> int:
        return int(self.moduli.shape[0])

    @property
    def has_circle(self) -> bool:
        return bool(self.circular.any())

    @property
    def is_torus2(self) -> bool:
        return (
            len(self.factors) == 2
            and all(f.kind == CIRCLE and math.isclose(f.modulus, TWO_PI) for f in self.factors)
        )

    def circle_indices(self) -> np.ndarray:
        return np.flatnonzero(self.circular)

    def euclid_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.circular)

    def __eq__(self, other):
        return isinstance(other, LatentSpaceSpec) and self.factors == other.factors

    def __hash__(self):
        return hash(self.factors)

    def __repr__(self):
        parts = []
        for f in self.factors:
            parts.append(f"Circle({f.modulus:g})" if f.kind == CIRCLE else f"Euclidean({f.dim})")
        return "LatentSpaceSpec(" + " x ".join(parts) + ")"

    # config round-trip: [{circle = 6.28}, {euclid = 2}]
    @classmethod
    def from_config(cls, items: Sequence[dict]) -> "LatentSpaceSpec":
        factors = []
        for i, item in enumerate(items):
            if not isinstance(item, dict) or len(item) != 1:
                raise InvalidArgument(f"latent[{i}] must be a single-key table, got {item!r}")
            (key, value), = item.items()
            if key == "circle":
                factors.append(Circle(float(value)))
            elif key == "euclid":
                factors.append(Euclidean(int(value)))
            else:
                raise InvalidArgument(f"latent[{i}]: unknown factor {key!r}")
        return cls(factors)

    def to_config(self) -> list:
        return [
            {"circle": f.modulus} if f.kind == CIRCLE else {"euclid": f.dim}
            for f in self.factors
        ]

    def _check(self, x, name="point"):
        arr = np.asarray(x, dtype=np.float64)
        if arr.shape[-1:] != (self.total_dim,) or arr.ndim not in (1, 2):
            raise ContractError(
                f"{name} has shape {arr.shape}, expected (..., {self.total_dim})"
            )
        return arr


def wrap(x, k):
    """Representative of ``x`` in ``[0, k)``."""
    if not (isinstance(k, (int, float, np.floating)) and math.isfinite(k) and k > 0):
        raise InvalidArgument(f"modulus must be a positive finite real, got {k!r}")
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InvalidArgument("wrap requires finite input")
    r = arr - k * np.floor(arr / k)
    r = np.where(r < 0.0, r + k, r)
    r = np.where(r >= k, r - k, r)
    return float(r) if r.ndim == 0 else r


def _as2d(arr):
    return arr[None, :] if arr.ndim == 1 else arr


def canonicalize(space: LatentSpaceSpec, z) -> np.ndarray:
    z = space._check(z)
    if not np.all(np.isfinite(z)):
        raise InvalidArgument("latent coordinates must be finite")
    out = _kernels.wrap_columns(np.ascontiguousarray(_as2d(z)), space._kmod, space.circular)
    return out[0] if z.ndim == 1 else out


def oplus(space: LatentSpaceSpec, z, delta) -> np.ndarray:
    """Group action: add ``delta`` and wrap the circular coordinates."""
    z = space._check(z, "z")
    delta = space._check(delta, "delta")
    if z.shape != delta.shape:
        raise ContractError(f"z {z.shape} and delta {delta.shape} differ in shape")
    return canonicalize(space, z + delta)


def signed_diff(space: LatentSpaceSpec, a, b) -> np.ndarray:
    """``a - b`` with circular components mapped into ``[-k/2, k/2)``."""
    a = space._check(a, "a")
    b = space._check(b, "b")
    if a.shape != b.shape:
        raise ContractError(f"a {a.shape} and b {b.shape} differ in shape")
    out = _kernels.signed_diff(
        np.ascontiguousarray(_as2d(a)), np.ascontiguousarray(_as2d(b)), space._kmod, space.circular
    )
    return out[0] if a.ndim == 1 else out


def distance(space: LatentSpaceSpec, a, b, metric: str = "L2"):
    diff = signed_diff(space, a, b)
    if metric == "L1":
        d = np.abs(diff).sum(axis=-1)
    elif metric == "L2":
        d = np.sqrt((diff * diff).sum(axis=-1))
    else:
        raise InvalidArgument(f"metric must be 'L1' or 'L2', got {metric!r}")
    return float(d) if np.ndim(d) == 0 else d


def metric_code(metric: str) -> int:
    if metric == "L1":
        return 1
    if metric == "L2":
        return 2
    raise InvalidArgument(f"metric must be 'L1' or 'L2', got {metric!r}")


def pairwise_distance(space: LatentSpaceSpec, A, B, metric: str = "L2") -> np.ndarray:
    A = np.ascontiguousarray(_as2d(space._check(A, "A")))
    B = np.ascontiguousarray(_as2d(space._check(B, "B")))
    return _kernels.pairwise_distance(A, B, space._kmod, space.circular, metric_code(metric))


def embed_torus(space: LatentSpaceSpec, z, alpha: float = 2.0, beta: float = 1.0) -> np.ndarray:
    """Map a point of the flat 2-torus to R^3 for plotting.

    Uses ``((a + b cos x) cos y, (a + b cos y) cos x, b sin y)``.
    """
    if not space.is_torus2:
        raise ContractError(f"embed_torus needs Circle(2pi) x Circle(2pi), got {space!r}")
    if not alpha > beta > 0:
        raise InvalidArgument("need alpha > beta > 0")
    z = space._check(z)
    x, y = z[..., 0], z[..., 1]
    out = np.stack(
        [
            (alpha + beta * np.cos(x)) * np.cos(y),
            (alpha + beta * np.cos(y)) * np.cos(x),
            beta * np.sin(y),
        ],
        axis=-1,
    )
    return out
