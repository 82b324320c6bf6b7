"""Scene descriptors, their token encoding, and procedural voxel scenes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidSpec, PlacementOverflow, UnknownToken

FREE, GROUND, BUILDING, VEHICLE = 0, 1, 2, 3
NUM_CLASSES = 4
CLASS_NAMES = ("free", "ground", "building", "vehicle")

DENSITIES = ("sparse", "medium", "dense")

# Token layout (fixed length 8):
#   BOS | density | building count | vehicle count | seed byte 0..3 (LE)
PAD, BOS = 0, 1
_DENSITY_BASE = 2
_COUNT_BASE = 5
MAX_COUNT = 15
_SEED_BASE = _COUNT_BASE + 2 * (MAX_COUNT + 1)
VOCAB_SIZE = _SEED_BASE + 256
TOKEN_LENGTH = 8
OBJECT_CLASSES = (BUILDING, VEHICLE)

# building footprint (cells) and height (cells) ranges, inclusive
_BUILDING_SIZE = {
    "sparse": ((2, 3), (2, 4)),
    "medium": ((2, 4), (3, 5)),
    "dense": ((3, 5), (4, 6)),
}
# count ranges used by random_spec, inclusive
_COUNT_RANGE = {
    "sparse": {BUILDING: (1, 2), VEHICLE: (1, 2)},
    "medium": {BUILDING: (2, 3), VEHICLE: (2, 3)},
    "dense": {BUILDING: (3, 4), VEHICLE: (2, 4)},
}
# vehicle extent in (depth, height, width) cells
VEHICLE_SIZE = (2, 1, 1)
PLACEMENT_ATTEMPTS = 200


def density_bounds(density: str, dims) -> tuple[float, float]:
    """Bounds on the non-free voxel fraction for scenes drawn by ``random_spec``."""
    D, H, W = dims
    total = D * H * W
    ground = D * W
    (_, fmax), (_, hmax) = _BUILDING_SIZE[density]
    hmax = min(hmax, H - 1)
    nb = _COUNT_RANGE[density][BUILDING][1]
    nv = _COUNT_RANGE[density][VEHICLE][1]
    most = ground + nb * fmax * fmax * hmax + nv * int(np.prod(VEHICLE_SIZE))
    return ground / total, most / total


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    object_counts: dict = field(default_factory=dict)
    density: str = "medium"

    def __post_init__(self):
        if self.density not in DENSITIES:
            raise InvalidSpec(f"unknown density {self.density!r}")
        if not 0 <= self.seed < 2**32:
            raise InvalidSpec("seed must fit in 32 bits")
        counts = {int(k): int(v) for k, v in self.object_counts.items()}
        for k, v in counts.items():
            if k not in OBJECT_CLASSES:
                raise InvalidSpec(f"class {k} is not a placeable object class")
            if not 0 <= v <= MAX_COUNT:
                raise InvalidSpec(f"count {v} outside [0, {MAX_COUNT}]")
        full = {c: counts.get(c, 0) for c in OBJECT_CLASSES}
        object.__setattr__(self, "object_counts", full)

    def __hash__(self):
        return hash((self.seed, tuple(sorted(self.object_counts.items())), self.density))

    @property
    def tokens(self) -> np.ndarray:
        return encode(self)

    def with_counts(self, counts) -> "SceneSpec":
        return SceneSpec(self.seed, dict(counts), self.density)


def encode(spec: SceneSpec) -> np.ndarray:
    toks = [BOS, _DENSITY_BASE + DENSITIES.index(spec.density)]
    for j, c in enumerate(OBJECT_CLASSES):
        toks.append(_COUNT_BASE + j * (MAX_COUNT + 1) + spec.object_counts[c])
    toks.extend(_SEED_BASE + b for b in int(spec.seed).to_bytes(4, "little"))
    return np.asarray(toks, dtype=np.int64)


def decode(tokens) -> SceneSpec:
    toks = [int(t) for t in tokens]
    if len(toks) != TOKEN_LENGTH:
        raise InvalidSpec(f"expected {TOKEN_LENGTH} tokens, got {len(toks)}")
    for t in toks:
        if not 0 <= t < VOCAB_SIZE:
            raise UnknownToken(f"token {t} outside vocabulary")
    if toks[0] != BOS:
        raise InvalidSpec("missing BOS token")
    d = toks[1] - _DENSITY_BASE
    if not 0 <= d < len(DENSITIES):
        raise InvalidSpec("bad density token")
    counts = {}
    for j, c in enumerate(OBJECT_CLASSES):
        v = toks[2 + j] - _COUNT_BASE - j * (MAX_COUNT + 1)
        if not 0 <= v <= MAX_COUNT:
            raise InvalidSpec("bad count token")
        counts[c] = v
    seed_bytes = [t - _SEED_BASE for t in toks[4:]]
    if any(not 0 <= b < 256 for b in seed_bytes):
        raise InvalidSpec("bad seed token")
    return SceneSpec(int.from_bytes(bytes(seed_bytes), "little"), counts, DENSITIES[d])


@dataclass
class OccupancyGrid:
    """Dense ``(D, H, W)`` class labels; ``H`` index 0 is the ground layer."""

    labels: np.ndarray
    voxel_size: float = 0.5
    num_classes: int = NUM_CLASSES

    def __post_init__(self):
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
        if self.labels.ndim != 3 or min(self.labels.shape) <= 0:
            raise ValueError(f"labels must be a nonempty 3-D array, got {self.labels.shape}")
        if self.labels.size and int(self.labels.max()) >= self.num_classes:
            raise ValueError("label outside [0, num_classes)")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.labels.shape)

    def histogram(self) -> np.ndarray:
        return np.bincount(self.labels.ravel(), minlength=self.num_classes)

    def __eq__(self, other):
        return (
            isinstance(other, OccupancyGrid)
            and self.voxel_size == other.voxel_size
            and self.num_classes == other.num_classes
            and np.array_equal(self.labels, other.labels)
        )


def random_spec(seed: int, density: str | None = None) -> SceneSpec:
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(0x5CE7,))))
    if density is None:
        density = DENSITIES[int(rng.integers(len(DENSITIES)))]
    counts = {c: int(rng.integers(lo, hi + 1)) for c, (lo, hi) in _COUNT_RANGE[density].items()}
    return SceneSpec(seed, counts, density)


def _free_with_margin(labels, d0, h0, w0, sd, sh, sw) -> bool:
    D, H, W = labels.shape
    if d0 < 0 or w0 < 0 or d0 + sd > D or w0 + sw > W or h0 + sh > H:
        return False
    region = labels[max(d0 - 1, 0) : d0 + sd + 1, 1 : min(h0 + sh + 1, H), max(w0 - 1, 0) : w0 + sw + 1]
    return not region.any()


def generate_scene(spec: SceneSpec, dims=(16, 8, 16), voxel_size: float = 0.5, camera_corridor: bool = True) -> OccupancyGrid:
    """Ground plane plus non-touching box objects, deterministic in ``spec``.

    Buildings are placed first, then vehicles, each with a one-cell gap to
    anything already placed. With ``camera_corridor`` the strip in front of the
    default camera is kept free of buildings. Raises :class:`PlacementOverflow`
    when some object finds no free slot.
    """
    D, H, W = dims
    labels = np.zeros(dims, dtype=np.uint8)
    labels[:, 0, :] = GROUND
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(spec.seed, spawn_key=(0x0CC,))))
    (fmin, fmax), (hmin, hmax) = _BUILDING_SIZE[spec.density]
    achieved = {c: 0 for c in OBJECT_CLASSES}
    failed = False

    for _ in range(spec.object_counts[BUILDING]):
        sd, sw = (int(v) for v in rng.integers(fmin, fmax + 1, size=2))
        sh = int(min(rng.integers(hmin, hmax + 1), H - 1))
        for _attempt in range(PLACEMENT_ATTEMPTS):
            d0 = int(rng.integers(0, D - sd + 1))
            w0 = int(rng.integers(0, W - sw + 1))
            if camera_corridor and d0 < 9 and w0 < W // 2 + 3 and w0 + sw > W // 2 - 3:
                continue
            if _free_with_margin(labels, d0, 1, w0, sd, sh, sw):
                labels[d0 : d0 + sd, 1 : 1 + sh, w0 : w0 + sw] = BUILDING
                achieved[BUILDING] += 1
                break
        else:
            failed = True

    sd, sh, sw = VEHICLE_SIZE
    for _ in range(spec.object_counts[VEHICLE]):
        for _attempt in range(PLACEMENT_ATTEMPTS):
            d0 = int(rng.integers(2, D - sd + 1))
            w0 = int(rng.integers(0, W - sw + 1))
            if _free_with_margin(labels, d0, 1, w0, sd, sh, sw):
                labels[d0 : d0 + sd, 1 : 1 + sh, w0 : w0 + sw] = VEHICLE
                achieved[VEHICLE] += 1
                break
        else:
            failed = True

    if failed:
        raise PlacementOverflow(f"could not place all objects of {spec}", achieved)
    return OccupancyGrid(labels, voxel_size, NUM_CLASSES)


def generate_placeable(spec: SceneSpec, dims=(16, 8, 16), voxel_size: float = 0.5) -> tuple[SceneSpec, OccupancyGrid]:
    """Like :func:`generate_scene`, lowering counts to what fits.

    The returned spec regenerates the returned grid exactly.
    """
    while True:
        try:
            return spec, generate_scene(spec, dims, voxel_size)
        except PlacementOverflow as exc:
            lowered = {c: min(spec.object_counts[c], exc.achieved[c]) for c in OBJECT_CLASSES}
            if lowered == spec.object_counts:
                lowered = {c: max(0, v - 1) for c, v in lowered.items()}
            spec = spec.with_counts(lowered)
