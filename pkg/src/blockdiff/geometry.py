"""Block partitioning, generation planning and KV-cache residency.

A block at (i, j) reads the cached state of its top, left and upper-left
neighbours. ``plan_generation`` groups blocks into n x n tiles in a
topological order and computes, by exact liveness analysis, which cache
entries must be stored after each tile and which die.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

Coord = tuple[int, int]


class GeometryError(ValueError):
    pass


class CacheContractError(RuntimeError):
    """A cache read/write that a correct plan would never issue."""


@dataclass(frozen=True)
class BlockGridSpec:
    block_size: int
    patch_size: int
    h: int
    w: int

    @property
    def patches_per_side(self) -> int:
        return self.block_size // self.patch_size

    @property
    def tokens_per_block(self) -> int:
        return self.patches_per_side**2

    @property
    def height(self) -> int:
        return self.h * self.block_size

    @property
    def width(self) -> int:
        return self.w * self.block_size

    def coords(self) -> list[Coord]:
        return [(i, j) for i in range(self.h) for j in range(self.w)]


def partition(H: int, W: int, B: int, p: int) -> BlockGridSpec:
    if B < 1 or p < 1 or B % p:
        raise GeometryError(f"block size {B} not divisible by patch size {p}")
    if H < 1 or W < 1 or H % B or W % B:
        raise GeometryError(f"image {H}x{W} not divisible by block size {B}")
    return BlockGridSpec(B, p, H // B, W // B)


def patchify(block: np.ndarray, p: int) -> np.ndarray:
    """(..., S, S, C) pixels -> (..., (S/p)^2, p*p*C) raster-ordered patch tokens."""
    *lead, s0, s1, c = block.shape
    if s0 % p or s1 % p:
        raise GeometryError(f"block {s0}x{s1} not divisible by patch size {p}")
    g0, g1 = s0 // p, s1 // p
    x = block.reshape(*lead, g0, p, g1, p, c)
    nl = len(lead)
    x = x.transpose(*range(nl), nl, nl + 2, nl + 1, nl + 3, nl + 4)
    return x.reshape(*lead, g0 * g1, p * p * c)


def unpatchify(tokens: np.ndarray, p: int, side: int | None = None) -> np.ndarray:
    """Inverse of ``patchify`` for square blocks."""
    *lead, t, dim = tokens.shape
    g = int(round(t**0.5)) if side is None else side // p
    if g * g != t or dim % (p * p):
        raise GeometryError(f"cannot unpatchify {t} tokens of size {dim} with p={p}")
    c = dim // (p * p)
    nl = len(lead)
    x = tokens.reshape(*lead, g, g, p, p, c)
    x = x.transpose(*range(nl), nl, nl + 2, nl + 1, nl + 3, nl + 4)
    return x.reshape(*lead, g * p, g * p, c)


def image_to_blocks(img: np.ndarray, B: int) -> np.ndarray:
    """(..., H, W, C) -> (..., h, w, B, B, C)."""
    *lead, H, W, c = img.shape
    if H % B or W % B:
        raise GeometryError(f"image {H}x{W} not divisible by block size {B}")
    nl = len(lead)
    x = img.reshape(*lead, H // B, B, W // B, B, c)
    return x.transpose(*range(nl), nl, nl + 2, nl + 1, nl + 3, nl + 4)


def blocks_to_image(blocks: np.ndarray) -> np.ndarray:
    *lead, h, w, B, _, c = blocks.shape
    nl = len(lead)
    x = blocks.transpose(*range(nl), nl, nl + 2, nl + 1, nl + 3, nl + 4)
    return x.reshape(*lead, h * B, w * B, c)


def dependencies(c: Coord, h: int | None = None, w: int | None = None) -> set[Coord]:
    """Direct (1st-order) dependencies: top, left and upper-left neighbours."""
    i, j = c
    out = {(i - 1, j), (i, j - 1), (i - 1, j - 1)}
    return {(a, b) for a, b in out if a >= 0 and b >= 0 and (h is None or a < h) and (w is None or b < w)}


def dependents(c: Coord, h: int, w: int) -> set[Coord]:
    i, j = c
    out = {(i + 1, j), (i, j + 1), (i + 1, j + 1)}
    return {(a, b) for a, b in out if a < h and b < w}


@dataclass(frozen=True)
class Batch:
    blocks: tuple[Coord, ...]
    rows: tuple[int, int]  # half-open row range of the tile
    cols: tuple[int, int]
    deps: frozenset[Coord]  # cached blocks read by this batch
    evict: tuple[Coord, ...]  # entries dead once this batch has read them
    store: tuple[Coord, ...]  # batch blocks whose state later batches read


@dataclass(frozen=True)
class GenerationPlan:
    h: int
    w: int
    n: int
    trajectory: str
    batches: tuple[Batch, ...]

    @property
    def bound(self) -> int:
        return (self.w if self.trajectory == "row_major" else self.h) + self.n

    def residency(self) -> list[tuple[int, int]]:
        """Per batch (blocks cached while the batch computes, blocks cached after it)."""
        live = 0
        out = []
        for b in self.batches:
            during = live
            live = live - len(b.evict) + len(b.store)
            out.append((during, live))
        return out

    def high_water(self) -> int:
        return max((max(r) for r in self.residency()), default=0)

    def report(self) -> str:
        lines = [f"# plan h={self.h} w={self.w} n={self.n} trajectory={self.trajectory} batches={len(self.batches)}"]
        for k, (b, (during, after)) in enumerate(zip(self.batches, self.residency())):
            coords = " ".join(f"{i},{j}" for i, j in b.blocks)
            ev = " ".join(f"{i},{j}" for i, j in b.evict) or "-"
            lines.append(
                f"batch {k}: blocks [{coords}] deps={len(b.deps)} evict [{ev}] store={len(b.store)} resident={during}/{after}"
            )
        lines.append(f"# high-water {self.high_water()} blocks (bound {self.bound})")
        return "\n".join(lines)


TRAJECTORIES = ("auto", "row_major", "column_major")


def plan_generation(h: int, w: int, n: int, trajectory: str = "auto") -> GenerationPlan:
    if n < 1:
        raise GeometryError("tile size n must be >= 1")
    if h < 1 or w < 1:
        raise GeometryError("grid must be non-empty")
    if trajectory not in TRAJECTORIES:
        raise GeometryError(f"unknown trajectory {trajectory!r}")
    if trajectory == "auto":
        trajectory = "column_major" if w > h else "row_major"
    th, tw = -(-h // n), -(-w // n)
    if trajectory == "row_major":
        tiles = [(ti, tj) for ti in range(th) for tj in range(tw)]
    else:
        tiles = [(ti, tj) for tj in range(tw) for ti in range(th)]

    spans = []
    owner: dict[Coord, int] = {}
    for k, (ti, tj) in enumerate(tiles):
        rows = (ti * n, min(h, ti * n + n))
        cols = (tj * n, min(w, tj * n + n))
        blocks = tuple((i, j) for i in range(*rows) for j in range(*cols))
        for c in blocks:
            owner[c] = k
        spans.append((rows, cols, blocks))

    # last batch (other than its own) that reads each block
    last_read: dict[Coord, int] = {}
    deps_of = []
    for k, (_, _, blocks) in enumerate(spans):
        deps = set()
        for c in blocks:
            for d in dependencies(c, h, w):
                if owner[d] != k:
                    deps.add(d)
        for d in deps:
            last_read[d] = max(last_read.get(d, -1), k)
        deps_of.append(frozenset(deps))

    dies: dict[int, list[Coord]] = {}
    for c, k in last_read.items():
        dies.setdefault(k, []).append(c)
    batches = []
    for k, (rows, cols, blocks) in enumerate(spans):
        store = tuple(c for c in blocks if c in last_read)
        batches.append(Batch(blocks, rows, cols, deps_of[k], tuple(sorted(dies.get(k, []))), store))
    return GenerationPlan(h, w, n, trajectory, tuple(batches))


def is_topological(plan: GenerationPlan) -> bool:
    """Every dependency of a batch block is in an earlier batch or the same batch."""
    done: set[Coord] = set()
    for b in plan.batches:
        cur = set(b.blocks)
        for c in b.blocks:
            if not dependencies(c, plan.h, plan.w) <= (done | cur):
                return False
        done |= cur
    return len(done) == plan.h * plan.w


class KVCacheStore:
    """Per-block cached layer state with residency accounting.

    Reading an evicted or absent entry, or overwriting a live one, raises
    ``CacheContractError``: either means the plan is wrong.
    """

    def __init__(self):
        self._entries: dict[Coord, list] = {}
        self._evicted: set[Coord] = set()
        self.high_water = 0
        self.high_water_bytes = 0
        self.nbytes = 0
        self.history: list[int] = []

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, c: Coord) -> bool:
        return c in self._entries

    @staticmethod
    def _size(entry) -> int:
        return sum(a.nbytes for layer in entry for a in layer)

    def put(self, c: Coord, entry: list) -> None:
        if c in self._entries:
            raise CacheContractError(f"cache entry {c} already present")
        self._entries[c] = entry
        self.nbytes += self._size(entry)
        self._touch()

    def get(self, c: Coord) -> list:
        try:
            return self._entries[c]
        except KeyError:
            state = "evicted" if c in self._evicted else "absent"
            raise CacheContractError(f"read of {state} cache entry {c}") from None

    def evict(self, c: Coord) -> None:
        try:
            entry = self._entries.pop(c)
        except KeyError:
            raise CacheContractError(f"evicting missing cache entry {c}") from None
        self.nbytes -= self._size(entry)
        self._evicted.add(c)

    def _touch(self) -> None:
        self.high_water = max(self.high_water, len(self._entries))
        self.high_water_bytes = max(self.high_water_bytes, self.nbytes)

    def mark(self) -> None:
        """Record the current residency (called once per batch)."""
        self._touch()
        self.history.append(len(self._entries))


def simulate_residency(plan: GenerationPlan, store: KVCacheStore | None = None) -> KVCacheStore:
    """Replay a plan against a store holding empty entries; raises on any contract violation."""
    store = store if store is not None else KVCacheStore()
    for b in plan.batches:
        for d in b.deps:
            store.get(d)
        store.mark()
        for c in b.evict:
            store.evict(c)
        for c in b.store:
            store.put(c, [])
        store.mark()
    return store


def peak_memory_estimate(n: int, w: int, M1: float, M2: float, C: float) -> float:
    """Peak bytes of a streamed run: n^2 working blocks, w + n cached blocks, plus fixed C."""
    if min(n, w, M1, M2, C) < 0:
        raise GeometryError("memory estimate inputs must be non-negative")
    return n * n * M1 + (w + n) * M2 + C
