"""Point-set primitives: I/O, synthetic scenes, block sampling, FPS and exact kNN."""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

SCHEMAS = {"scannet-6d": 6, "s3dis-9d": 9}


class PointCloudParseError(ValueError):
    """Raised when an interchange file cannot be parsed."""


@dataclass
class PointCloud:
    positions: np.ndarray
    features: np.ndarray
    labels: np.ndarray | None
    num_classes: int
    schema: str = "scannet-6d"
    # row indices into the cloud this one was cut from (blocks only)
    source_index: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] != len(self.positions):
            raise ValueError(
                f"features shape {self.features.shape} does not match {len(self.positions)} positions"
            )
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.positions),):
                raise ValueError("labels length does not match positions")
            if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
                raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def rgb(self) -> np.ndarray:
        return self.features[:, 3:6]


@dataclass
class NeighborTable:
    indices: np.ndarray
    distances: np.ndarray

    @property
    def query_count(self) -> int:
        return self.indices.shape[0]

    @property
    def k(self) -> int:
        return self.indices.shape[1]


# ---------------------------------------------------------------------------
# feature assembly and I/O


def _room_normalized(positions: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    extent = hi - lo
    safe = np.where(extent > 0, extent, 1.0)
    return np.where(extent > 0, (positions - lo) / safe, 0.0)


def assemble_features(positions, rgb, schema, room_lo=None, room_hi=None, xyz=None):
    """Build the per-point input feature matrix for ``schema``.

    ``xyz`` overrides the coordinate channels (blocks use center-shifted
    coordinates there); the room-normalized channels of the 9-D layout are
    always taken relative to ``room_lo``/``room_hi``.
    """
    if schema not in SCHEMAS:
        raise ValueError(f"unknown schema {schema!r}; expected one of {sorted(SCHEMAS)}")
    positions = np.asarray(positions, dtype=np.float64)
    cols = [positions if xyz is None else xyz, np.asarray(rgb, dtype=np.float64)]
    if schema == "s3dis-9d":
        lo = positions.min(axis=0) if room_lo is None else room_lo
        hi = positions.max(axis=0) if room_hi is None else room_hi
        cols.append(_room_normalized(positions, lo, hi))
    return np.concatenate(cols, axis=1)


def load_point_cloud(path, schema: str = "scannet-6d", num_classes: int = 13) -> PointCloud:
    """Read an ASCII ``x y z r g b [label]`` file."""
    if schema not in SCHEMAS:
        raise ValueError(f"unknown schema {schema!r}")
    rows, labels = [], []
    has_label = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) not in (6, 7):
                raise PointCloudParseError(f"line {lineno}: expected 6 or 7 fields, got {len(parts)}")
            try:
                xyz = [float(v) for v in parts[:3]]
                rgb = [int(v) for v in parts[3:6]]
                label = int(parts[6]) if len(parts) == 7 else None
            except ValueError as exc:
                raise PointCloudParseError(f"line {lineno}: {exc}") from None
            if not all(np.isfinite(xyz)):
                raise PointCloudParseError(f"line {lineno}: non-finite coordinate")
            if any(c < 0 or c > 255 for c in rgb):
                raise PointCloudParseError(f"line {lineno}: color channel outside 0-255")
            if label is not None and label < 0:
                raise PointCloudParseError(f"line {lineno}: negative label")
            if has_label is None:
                has_label = label is not None
            elif has_label != (label is not None):
                raise PointCloudParseError(f"line {lineno}: label column present on some lines only")
            rows.append(xyz + rgb)
            labels.append(label)
    if not rows:
        raise PointCloudParseError(f"{path}: no points")
    data = np.asarray(rows, dtype=np.float64)
    lab = np.asarray(labels, dtype=np.int64) if has_label else None
    if lab is not None and lab.max() >= num_classes:
        bad = int(np.argmax(lab >= num_classes))
        raise ValueError(f"point {bad}: label {lab[bad]} out of range for {num_classes} classes")
    positions = data[:, :3]
    feats = assemble_features(positions, data[:, 3:6] / 255.0, schema)
    return PointCloud(positions, feats, lab, num_classes, schema)


def save_point_cloud(cloud: PointCloud, path) -> None:
    rgb = np.clip(np.rint(cloud.rgb * 255.0), 0, 255).astype(int)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# x y z r g b label\n")
        for i in range(len(cloud)):
            x, y, z = cloud.positions[i]
            line = f"{x:.6f} {y:.6f} {z:.6f} {rgb[i, 0]} {rgb[i, 1]} {rgb[i, 2]}"
            if cloud.labels is not None:
                line += f" {cloud.labels[i]}"
            fh.write(line + "\n")


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass
class Primitive:
    """Axis-aligned box; a zero extent along one axis makes it a plane."""

    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    label: int
    points: int
    color: tuple[float, float, float] = (0.5, 0.5, 0.5)

    def face_areas(self) -> np.ndarray:
        ext = np.asarray(self.hi, float) - np.asarray(self.lo, float)
        # faces normal to x, y, z (two each)
        a = np.array([ext[1] * ext[2], ext[0] * ext[2], ext[0] * ext[1]])
        return np.repeat(a, 2)

    def contains_surface_point(self, p: np.ndarray, tol: float = 1e-9) -> np.ndarray:
        lo, hi = np.asarray(self.lo, float), np.asarray(self.hi, float)
        inside = np.all((p >= lo - tol) & (p <= hi + tol), axis=1)
        on_face = np.any(np.isclose(p, lo, atol=tol) | np.isclose(p, hi, atol=tol), axis=1)
        return inside & on_face


@dataclass
class SceneSpec:
    primitives: list[Primitive]
    num_classes: int
    schema: str = "scannet-6d"
    color_noise: float = 0.0

    @property
    def total_points(self) -> int:
        return sum(p.points for p in self.primitives)


def _sample_surface(prim: Primitive, n: int, rng: np.random.Generator) -> np.ndarray:
    lo, hi = np.asarray(prim.lo, float), np.asarray(prim.hi, float)
    if np.any(hi < lo):
        raise ValueError(f"primitive bounds inverted: {prim.lo} > {prim.hi}")
    areas = prim.face_areas()
    if areas.sum() <= 0:
        raise ValueError("primitive has zero surface area")
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.random((n, 3))
    pts = lo + u * (hi - lo)
    axis = face // 2
    side = face % 2
    rows = np.arange(n)
    pts[rows, axis] = np.where(side == 0, lo[axis], hi[axis])
    return pts


def synth_scene(spec: SceneSpec, rng_seed: int) -> PointCloud:
    """Sample points uniformly over the surfaces of labeled primitives."""
    if not spec.primitives or spec.total_points <= 0:
        raise ValueError("scene spec has zero total point budget")
    rng = np.random.default_rng(rng_seed)
    pos, rgb, lab = [], [], []
    for prim in spec.primitives:
        if not 0 <= prim.label < spec.num_classes:
            raise ValueError(f"primitive label {prim.label} out of range")
        if prim.points < 0:
            raise ValueError("negative point budget")
        if prim.points == 0:
            continue
        p = _sample_surface(prim, prim.points, rng)
        c = np.tile(np.asarray(prim.color, float), (prim.points, 1))
        if spec.color_noise > 0:
            c = np.clip(c + rng.normal(0.0, spec.color_noise, c.shape), 0.0, 1.0)
        pos.append(p)
        rgb.append(c)
        lab.append(np.full(prim.points, prim.label, dtype=np.int64))
    positions = np.concatenate(pos)
    feats = assemble_features(positions, np.concatenate(rgb), spec.schema)
    return PointCloud(positions, feats, np.concatenate(lab), spec.num_classes, spec.schema)


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.replace(",", " ").split())


def read_scene_spec(path) -> SceneSpec:
    """Parse a scene description file.

    ``[scene]`` holds ``num_classes``, ``schema`` and ``color_noise``; every
    ``[primitive <name>]`` section holds ``min``, ``max``, ``label``,
    ``points`` and an optional ``color`` in [0, 1].
    """
    cp = configparser.ConfigParser()
    if not cp.read(path, encoding="utf-8"):
        raise FileNotFoundError(path)
    scene = cp["scene"] if cp.has_section("scene") else {}
    prims = []
    for name in cp.sections():
        if not name.startswith("primitive"):
            continue
        sec = cp[name]
        prims.append(
            Primitive(
                lo=_floats(sec["min"]),
                hi=_floats(sec["max"]),
                label=int(sec["label"]),
                points=int(sec["points"]),
                color=_floats(sec.get("color", "0.5 0.5 0.5")),
            )
        )
    return SceneSpec(
        primitives=prims,
        num_classes=int(scene.get("num_classes", 4)),
        schema=scene.get("schema", "scannet-6d"),
        color_noise=float(scene.get("color_noise", 0.0)),
    )


PALETTE = [
    (0.55, 0.55, 0.55),
    (0.80, 0.25, 0.20),
    (0.20, 0.60, 0.25),
    (0.25, 0.35, 0.80),
    (0.85, 0.75, 0.20),
    (0.60, 0.30, 0.70),
    (0.20, 0.70, 0.75),
    (0.90, 0.50, 0.10),
]


def random_scene_spec(
    seed,
    num_classes: int = 4,
    points_per_class: int = 128,
    extent: float = 1.0,
    colored: bool = True,
    color_noise: float = 0.05,
    schema: str = "scannet-6d",
) -> SceneSpec:
    """A small room: class 0 is the floor, every other class one box on it.

    With ``colored=False`` all surfaces share one color, so classes can only
    be told apart by geometry.
    """
    rng = np.random.default_rng(seed)
    prims = [Primitive((0.0, 0.0, 0.0), (extent, extent, 0.0), 0, points_per_class, PALETTE[0])]
    n_boxes = num_classes - 1
    # one grid cell per box keeps boxes apart
    cells = int(np.ceil(np.sqrt(max(n_boxes, 1))))
    slots = rng.permutation(cells * cells)[:n_boxes]
    cell = extent / cells
    for c, slot in zip(range(1, num_classes), slots):
        cx, cy = (slot % cells + 0.5) * cell, (slot // cells + 0.5) * cell
        half = rng.uniform(0.2, 0.35, size=2) * cell
        height = rng.uniform(0.1, 0.4) * extent
        prims.append(
            Primitive(
                (cx - half[0], cy - half[1], 0.0),
                (cx + half[0], cy + half[1], height),
                c,
                points_per_class,
                PALETTE[c % len(PALETTE)],
            )
        )
    if not colored:
        prims = [replace(p, color=PALETTE[0]) for p in prims]
    return SceneSpec(prims, num_classes, schema, color_noise)


# ---------------------------------------------------------------------------
# blocks


def _make_block(cloud: PointCloud, idx: np.ndarray, center: np.ndarray) -> PointCloud:
    pos = cloud.positions[idx]
    xyz = pos - np.array([center[0], center[1], 0.0])
    rgb = cloud.features[idx, 3:6]
    lo, hi = cloud.positions.min(axis=0), cloud.positions.max(axis=0)
    feats = assemble_features(pos, rgb, cloud.schema, lo, hi, xyz=xyz)
    labels = None if cloud.labels is None else cloud.labels[idx]
    return PointCloud(pos, feats, labels, cloud.num_classes, cloud.schema, source_index=idx)


def _fill(idx: np.ndarray, n_points: int, rng: np.random.Generator) -> np.ndarray:
    if len(idx) >= n_points:
        return rng.choice(idx, size=n_points, replace=False)
    extra = rng.choice(idx, size=n_points - len(idx), replace=True)
    return rng.permutation(np.concatenate([idx, extra]))


def sample_block(
    cloud: PointCloud,
    block_size: float = 0.8,
    padding: float = 0.1,
    n_points: int = 4096,
    rng_seed=0,
) -> PointCloud:
    """Cut one fixed-size training block around a randomly chosen point."""
    if len(cloud) == 0:
        raise ValueError("cannot sample a block from an empty cloud")
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    rng = np.random.default_rng(rng_seed)
    half = block_size / 2.0 + padding
    xy = cloud.positions[:, :2]
    for _ in range(100):
        center = xy[rng.integers(len(cloud))]
        inside = np.all(np.abs(xy - center) <= half, axis=1)
        idx = np.flatnonzero(inside)
        if len(idx):
            break
    else:
        raise RuntimeError("no non-empty block found after 100 draws")
    return _make_block(cloud, _fill(idx, n_points, rng), center)


def tile_blocks(
    cloud: PointCloud,
    block_size: float,
    padding: float,
    n_points: int,
    stride: float | None = None,
    rng_seed=0,
) -> list[PointCloud]:
    """Fixed-size blocks that together contain every point of ``cloud``.

    Tiles step by ``stride`` (default ``block_size``) over the xy extent. The
    points of a tile (its square grown by ``padding``) are shuffled and
    split into chunks of ``n_points``; the last chunk is topped up by
    resampling the tile.
    """
    stride = block_size if stride is None else stride
    rng = np.random.default_rng(rng_seed)
    xy = cloud.positions[:, :2]
    lo, hi = xy.min(axis=0), xy.max(axis=0)
    nx = max(1, int(np.ceil((hi[0] - lo[0] - block_size) / stride - 1e-9)) + 1)
    ny = max(1, int(np.ceil((hi[1] - lo[1] - block_size) / stride - 1e-9)) + 1)
    covered = np.zeros(len(cloud), dtype=bool)
    blocks = []
    for ix in range(nx):
        for iy in range(ny):
            x0, y0 = lo[0] + ix * stride, lo[1] + iy * stride
            core = (xy[:, 0] >= x0) & (xy[:, 1] >= y0)
            core &= (xy[:, 0] < x0 + block_size) | (ix == nx - 1)
            core &= (xy[:, 1] < y0 + block_size) | (iy == ny - 1)
            if not core.any():
                continue
            center = np.array([x0 + block_size / 2.0, y0 + block_size / 2.0])
            near = np.all(np.abs(xy - center) <= block_size / 2.0 + padding, axis=1)
            idx = np.flatnonzero(near | core)
            covered |= core
            order = rng.permutation(idx)
            for start in range(0, len(order), n_points):
                chunk = order[start : start + n_points]
                if len(chunk) < n_points:
                    extra = rng.choice(idx, size=n_points - len(chunk), replace=True)
                    chunk = np.concatenate([chunk, extra])
                blocks.append(_make_block(cloud, chunk, center))
    assert covered.all(), "tiling left points uncovered"
    return blocks


# ---------------------------------------------------------------------------
# sampling and neighbor search


def _as_positions(points) -> np.ndarray:
    if isinstance(points, PointCloud):
        return points.positions
    return np.asarray(points, dtype=np.float64).reshape(-1, 3)


def farthest_point_sample(points, m: int, start_index: int = 0) -> np.ndarray:
    """Greedy farthest point sampling; ties go to the lowest index."""
    pos = _as_positions(points)
    n = len(pos)
    if not 1 <= m <= n:
        raise ValueError(f"cannot sample m={m} points from {n}")
    if not 0 <= start_index < n:
        raise ValueError(f"start_index {start_index} out of range")
    picked = np.empty(m, dtype=np.int64)
    mind = np.full(n, np.inf)
    cur = start_index
    for t in range(m):
        picked[t] = cur
        d = np.sum((pos - pos[cur]) ** 2, axis=1)
        np.minimum(mind, d, out=mind)
        mind[cur] = -1.0
        cur = int(np.argmax(mind))
    return picked


def knn(query, reference, k: int, chunk: int = 256) -> NeighborTable:
    """Exact Euclidean k-nearest neighbors, ties broken by reference index."""
    q = _as_positions(query)
    r = _as_positions(reference)
    if not 1 <= k <= len(r):
        raise ValueError(f"k={k} must lie in [1, {len(r)}]")
    out_idx = np.empty((len(q), k), dtype=np.int64)
    out_d2 = np.empty((len(q), k))
    for s in range(0, len(q), chunk):
        diff = q[s : s + chunk, None, :] - r[None, :, :]
        d2 = np.einsum("mrc,mrc->mr", diff, diff)
        kth = np.partition(d2, k - 1, axis=1)[:, k - 1 : k]
        less = d2 < kth
        eq = d2 == kth
        need = k - less.sum(axis=1, keepdims=True)
        sel = less | (eq & (np.cumsum(eq, axis=1) <= need))
        cols = np.nonzero(sel)[1].reshape(-1, k)
        dsel = np.take_along_axis(d2, cols, axis=1)
        order = np.argsort(dsel, axis=1, kind="stable")
        out_idx[s : s + chunk] = np.take_along_axis(cols, order, axis=1)
        out_d2[s : s + chunk] = np.take_along_axis(dsel, order, axis=1)
    return NeighborTable(out_idx, np.sqrt(out_d2))


def knn_with_self(points, k: int) -> np.ndarray:
    """kNN of a set against itself with every row guaranteed to hold its own index.

    Only duplicated positions can push a point out of its own neighbor
    list; such rows give up their farthest neighbor for the point itself.
    """
    idx = knn(points, points, k).indices
    rows = np.arange(len(idx))
    missing = ~np.any(idx == rows[:, None], axis=1)
    idx[missing, -1] = rows[missing]
    return idx
