"""Spatial primitives: boxes, space-filling-curve keys and particle generators."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

MAX_LEVEL = 21


class CurveKind(enum.Enum):
    MORTON = "morton"
    HILBERT = "hilbert"


class DistKind(enum.Enum):
    UNIFORM_CUBE = "uniform-cube"
    SPHERE_SURFACE = "sphere-surface"
    SPHERE_VOLUME = "sphere-volume"


@dataclass(frozen=True, eq=False)
class Box3:
    """Axis-aligned box. ``lo == hi`` is allowed (single point)."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float).reshape(3)
        hi = np.asarray(self.hi, dtype=float).reshape(3)
        if np.any(lo > hi):
            raise ValueError(f"box has lo > hi: {lo} {hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def around(cls, pos: np.ndarray) -> "Box3":
        """Tight box of a (n, 3) point set."""
        pos = np.asarray(pos, dtype=float)
        if len(pos) == 0:
            raise ValueError("cannot bound an empty point set")
        return cls(pos.min(axis=0), pos.max(axis=0))

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    @property
    def extent(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def radius(self) -> float:
        """Half the diagonal."""
        return 0.5 * float(np.linalg.norm(self.hi - self.lo))

    def contains(self, pos: np.ndarray) -> np.ndarray | bool:
        pos = np.asarray(pos)
        inside = np.all((pos >= self.lo) & (pos <= self.hi), axis=-1)
        return bool(inside) if inside.ndim == 0 else inside

    def distance_to(self, pts: np.ndarray) -> np.ndarray | float:
        """Euclidean distance from point(s) to the nearest point of the box."""
        pts = np.asarray(pts, dtype=float)
        gap = np.maximum(self.lo - pts, 0.0) + np.maximum(pts - self.hi, 0.0)
        d = np.sqrt(np.sum(gap * gap, axis=-1))
        return float(d) if d.ndim == 0 else d

    def inflate(self, eps: float) -> "Box3":
        return Box3(self.lo - eps, self.hi + eps)

    def intersects(self, other: "Box3") -> bool:
        """Closed-box overlap test (touching counts)."""
        return bool(np.all(self.lo <= other.hi) and np.all(other.lo <= self.hi))

    def bounding_cube(self) -> "Box3":
        half = 0.5 * float(self.extent.max())
        c = self.center
        # rounding in c +- half may shave the extreme faces; never shrink below self
        return Box3(np.minimum(c - half, self.lo), np.maximum(c + half, self.hi))

    def __eq__(self, other):
        if not isinstance(other, Box3):
            return NotImplemented
        return bool(np.array_equal(self.lo, other.lo) and np.array_equal(self.hi, other.hi))

    def __repr__(self):
        return f"Box3(lo={self.lo.tolist()}, hi={self.hi.tolist()})"


@dataclass(frozen=True)
class SfcKey:
    key: int
    level: int
    kind: CurveKind = CurveKind.MORTON

    def __post_init__(self):
        if not 0 <= self.level <= MAX_LEVEL:
            raise ValueError(f"level {self.level} outside 0..{MAX_LEVEL}")
        if not 0 <= self.key < 8 ** self.level:
            raise ValueError(f"key {self.key} out of range for level {self.level}")

    def parent(self) -> "SfcKey":
        if self.level == 0:
            raise ValueError("root key has no parent")
        return SfcKey(self.key >> 3, self.level - 1, self.kind)


# ---------------------------------------------------------------------------
# Morton (bit interleave, x least significant inside every 3-bit group)


def _check_indices(idx, level):
    if not 0 <= level <= MAX_LEVEL:
        raise ValueError(f"level {level} outside 0..{MAX_LEVEL}")
    idx = np.asarray(idx)
    if np.any(idx < 0) or np.any(idx >= (1 << level)):
        raise ValueError(f"cell index out of range for level {level}")


def _spread3(v: np.ndarray) -> np.ndarray:
    v = v.astype(np.uint64) & np.uint64(0x1FFFFF)
    v = (v | (v << np.uint64(32))) & np.uint64(0x1F00000000FFFF)
    v = (v | (v << np.uint64(16))) & np.uint64(0x1F0000FF0000FF)
    v = (v | (v << np.uint64(8))) & np.uint64(0x100F00F00F00F00F)
    v = (v | (v << np.uint64(4))) & np.uint64(0x10C30C30C30C30C3)
    v = (v | (v << np.uint64(2))) & np.uint64(0x1249249249249249)
    return v


def _compact3(v: np.ndarray) -> np.ndarray:
    v = v.astype(np.uint64) & np.uint64(0x1249249249249249)
    v = (v | (v >> np.uint64(2))) & np.uint64(0x10C30C30C30C30C3)
    v = (v | (v >> np.uint64(4))) & np.uint64(0x100F00F00F00F00F)
    v = (v | (v >> np.uint64(8))) & np.uint64(0x1F0000FF0000FF)
    v = (v | (v >> np.uint64(16))) & np.uint64(0x1F00000000FFFF)
    v = (v | (v >> np.uint64(32))) & np.uint64(0x1FFFFF)
    return v


def morton_encode(ijk: np.ndarray, level: int) -> np.ndarray:
    """Vectorised Morton keys for an (n, 3) integer array of cell indices."""
    ijk = np.asarray(ijk)
    _check_indices(ijk, level)
    return _spread3(ijk[..., 0]) | (_spread3(ijk[..., 1]) << np.uint64(1)) | (
        _spread3(ijk[..., 2]) << np.uint64(2)
    )


def morton_decode(keys: np.ndarray, level: int) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.uint64)
    out = np.stack([_compact3(keys), _compact3(keys >> np.uint64(1)), _compact3(keys >> np.uint64(2))], axis=-1)
    return out.astype(np.int64)


# ---------------------------------------------------------------------------
# Hilbert: Skilling's transpose construction, vectorised over points.


def _axes_to_transpose(x: list[np.ndarray], bits: int) -> list[np.ndarray]:
    n = len(x)
    x = [a.copy() for a in x]
    q = 1 << (bits - 1)
    while q > 1:
        p = q - 1
        for i in range(n):
            hit = (x[i] & q) != 0
            t = (x[0] ^ x[i]) & p
            x0 = np.where(hit, x[0] ^ p, x[0] ^ t)
            if i != 0:
                x[i] = np.where(hit, x[i], x[i] ^ t)
            x[0] = x0
        q >>= 1
    for i in range(1, n):
        x[i] = x[i] ^ x[i - 1]
    t = np.zeros_like(x[0])
    q = 1 << (bits - 1)
    while q > 1:
        t = np.where((x[n - 1] & q) != 0, t ^ (q - 1), t)
        q >>= 1
    return [a ^ t for a in x]


def _transpose_to_axes(x: list[np.ndarray], bits: int) -> list[np.ndarray]:
    n = len(x)
    x = [a.copy() for a in x]
    t = x[n - 1] >> 1
    for i in range(n - 1, 0, -1):
        x[i] = x[i] ^ x[i - 1]
    x[0] = x[0] ^ t
    q = 2
    top = 2 << (bits - 1)
    while q != top:
        p = q - 1
        for i in range(n - 1, -1, -1):
            hit = (x[i] & q) != 0
            t = (x[0] ^ x[i]) & p
            x0 = np.where(hit, x[0] ^ p, x[0] ^ t)
            if i != 0:
                x[i] = np.where(hit, x[i], x[i] ^ t)
            x[0] = x0
        q <<= 1
    return x


def hilbert_encode_nd(coords: np.ndarray, level: int) -> np.ndarray:
    """Hilbert index of (n, d) integer coordinates on a 2**level grid.

    The first axis carries the most significant bit of every d-bit group.
    """
    coords = np.asarray(coords, dtype=np.int64)
    ndim = coords.shape[-1]
    if level == 0:
        return np.zeros(coords.shape[:-1], dtype=np.uint64)
    axes = [coords[..., i].astype(np.int64) for i in range(ndim)]
    tr = _axes_to_transpose(axes, level)
    key = np.zeros(coords.shape[:-1], dtype=np.uint64)
    for b in range(level - 1, -1, -1):
        for i in range(ndim):
            key = (key << np.uint64(1)) | ((tr[i] >> b) & 1).astype(np.uint64)
    return key


def hilbert_decode_nd(keys: np.ndarray, level: int, ndim: int) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.uint64)
    if level == 0:
        return np.zeros(keys.shape + (ndim,), dtype=np.int64)
    tr = [np.zeros(keys.shape, dtype=np.int64) for _ in range(ndim)]
    shift = ndim * level - 1
    for b in range(level - 1, -1, -1):
        for i in range(ndim):
            bit = ((keys >> np.uint64(shift)) & np.uint64(1)).astype(np.int64)
            tr[i] = tr[i] | (bit << b)
            shift -= 1
    axes = _transpose_to_axes(tr, level)
    return np.stack(axes, axis=-1)


def hilbert_encode(ijk: np.ndarray, level: int) -> np.ndarray:
    _check_indices(ijk, level)
    return hilbert_encode_nd(ijk, level)


def hilbert_decode(keys: np.ndarray, level: int) -> np.ndarray:
    return hilbert_decode_nd(keys, level, 3)


def encode_keys(ijk: np.ndarray, level: int, kind: CurveKind) -> np.ndarray:
    if kind is CurveKind.MORTON:
        return morton_encode(ijk, level)
    return hilbert_encode(ijk, level)


def encode_key(i: int, j: int, k: int, level: int, kind: CurveKind = CurveKind.MORTON) -> SfcKey:
    _check_indices([i, j, k], level)
    key = encode_keys(np.array([i, j, k]), level, kind)
    return SfcKey(int(key), level, kind)


def decode_key(key: SfcKey) -> tuple[int, int, int, int]:
    arr = np.array(key.key, dtype=np.uint64)
    if key.kind is CurveKind.MORTON:
        ijk = morton_decode(arr, key.level)
    else:
        ijk = hilbert_decode(arr, key.level)
    return int(ijk[0]), int(ijk[1]), int(ijk[2]), key.level


def cell_indices(pos: np.ndarray, root: Box3, level: int) -> np.ndarray:
    """Integer grid coordinates of points inside ``root`` at ``level``."""
    side = float(root.extent.max())
    n = 1 << level
    if side == 0.0:
        return np.zeros(np.shape(pos), dtype=np.int64)
    ijk = np.floor((np.asarray(pos) - root.lo) / side * n).astype(np.int64)
    return np.clip(ijk, 0, n - 1)


# ---------------------------------------------------------------------------
# Particles and distributions


@dataclass
class Particles:
    """Structure-of-arrays particle set.

    ``ids`` are global identities; they survive partitioning and reordering.
    """

    pos: np.ndarray
    q: np.ndarray
    ids: np.ndarray = None
    phi: np.ndarray = field(default=None, repr=False)
    force: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.pos = np.ascontiguousarray(self.pos, dtype=float).reshape(-1, 3)
        self.q = np.ascontiguousarray(self.q, dtype=float).reshape(-1)
        n = len(self.pos)
        if len(self.q) != n:
            raise ValueError("pos and q lengths differ")
        if self.ids is None:
            self.ids = np.arange(n, dtype=np.int64)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.phi is None:
            self.phi = np.zeros(n)
        if self.force is None:
            self.force = np.zeros((n, 3))

    def __len__(self):
        return len(self.q)

    def subset(self, idx) -> "Particles":
        return Particles(self.pos[idx], self.q[idx], self.ids[idx], self.phi[idx], self.force[idx])


@dataclass(frozen=True)
class Distribution:
    kind: DistKind
    n: int
    seed: int = 0


def generate(dist: Distribution) -> Particles:
    """Deterministic particles with charge 1/n each.

    SphereSurface lies on the unit sphere about the origin; UniformCube fills
    [0, 1)^3; SphereVolume fills the unit ball.
    """
    n = dist.n
    if n <= 0:
        raise ValueError("particle count must be positive")
    rng = np.random.default_rng(dist.seed)
    if dist.kind is DistKind.UNIFORM_CUBE:
        pos = rng.random((n, 3))
    else:
        cos_t = rng.uniform(-1.0, 1.0, n)
        phi = rng.uniform(0.0, 2.0 * np.pi, n)
        sin_t = np.sqrt(1.0 - cos_t * cos_t)
        pos = np.column_stack([sin_t * np.cos(phi), sin_t * np.sin(phi), cos_t])
        if dist.kind is DistKind.SPHERE_VOLUME:
            pos *= np.cbrt(rng.random(n))[:, None]
    return Particles(pos, np.full(n, 1.0 / n))
