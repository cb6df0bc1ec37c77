"""Online semantic map of superpoints.

Each detection with a metric location becomes an :class:`ObjectPoint`.
Fusing it into the map adds a view/scale weighted score to every nearby
superpoint (plus a reward for those within the category's smallest
extent), records novel view directions and distance octaves, and creates
a new superpoint when nothing sits within that smallest extent.  The map
then turns the local score balance into a probability factor in
[0.5, 1).

Storage is columnar: superpoint locations, a dense score matrix
(superpoint x category) and flat view/scale arrays chained into
per-superpoint lists.  A uniform hash grid indexes locations; the fusion
inner loop is compiled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .errors import ConfigError, InvalidInputError
from .geometry import angular_difference
from ._kernels import _EMPTY, _OFFSET, fuse_observation, grid_insert, grid_query, grid_rehash, pack_cell

_CELL_LIMIT = _OFFSET
from .scale import ScaleDatabase, scale_bucket

APPEND_GATES = ("per_superpoint", "pooled")


@dataclass(frozen=True)
class MapConfig:
    k_s: float = 0.2
    s_diff_cap: float = 5.0
    view_gate_deg: float = 45.0
    view_cap_deg: float = 90.0
    reward: float = 1.0
    append_gate: str = "per_superpoint"

    def __post_init__(self):
        if not self.k_s > 0:
            raise ConfigError("k_s must be positive")
        if not math.isclose(1.0 / self.k_s, self.s_diff_cap, rel_tol=1e-12):
            raise ConfigError("s_diff_cap must equal 1 / k_s")
        if not 0 <= self.view_gate_deg < self.view_cap_deg <= 180:
            raise ConfigError("need 0 <= view_gate_deg < view_cap_deg <= 180")
        if self.reward < 0:
            raise ConfigError("reward must be non-negative")
        if self.append_gate not in APPEND_GATES:
            raise ConfigError(f"append_gate must be one of {APPEND_GATES}")


@dataclass(frozen=True, eq=False)
class ObjectPoint:
    """A single detection lifted to 3D."""

    loc: np.ndarray
    label: int
    view: np.ndarray
    scale: int
    p_l: float

    def __post_init__(self):
        view = np.asarray(self.view, dtype=np.float64)
        if view.shape != (3,) or abs(float(np.linalg.norm(view)) - 1.0) > 1e-6:
            raise InvalidInputError("view must be a unit 3-vector")
        if not 0.0 < self.p_l <= 1.0:
            raise InvalidInputError(f"p_l {self.p_l!r} outside (0, 1]")
        object.__setattr__(self, "loc", np.asarray(self.loc, dtype=np.float64))
        object.__setattr__(self, "view", view)

    @classmethod
    def from_observation(cls, loc, label: int, p_l: float, camera_position, d: float) -> "ObjectPoint":
        """Build from a scale estimate: view runs camera -> loc, scale is the octave of ``d``."""
        loc = np.asarray(loc, dtype=np.float64)
        ray = loc - np.asarray(camera_position, dtype=np.float64)
        norm = float(np.linalg.norm(ray))
        if norm == 0.0:
            raise InvalidInputError("object location coincides with the camera")
        return cls(loc, label, ray / norm, scale_bucket(d), p_l)


@dataclass
class SuperPoint:
    id: int
    loc: np.ndarray
    list_score: dict[int, float] = field(default_factory=dict)
    list_view: list[np.ndarray] = field(default_factory=list)
    list_scale: list[int] = field(default_factory=list)


@dataclass(frozen=True)
class FusionWeights:
    """``v_diff``/``s_diff`` are infinite when there was no earlier observation."""

    v_diff: float
    s_diff: float
    w_v: float
    w_s: float
    E_in: float


@dataclass(frozen=True)
class FuseOutcome:
    updated: tuple[int, ...]
    created: Optional[int]
    weights: FusionWeights

    @property
    def E_in(self) -> float:
        return self.weights.E_in


def view_weight(v_diff: float, cfg: MapConfig) -> float:
    if v_diff < cfg.view_gate_deg:
        return 0.0
    if v_diff <= cfg.view_cap_deg:
        return (v_diff - cfg.view_gate_deg) / (cfg.view_cap_deg - cfg.view_gate_deg)
    return 1.0


def scale_weight(s_diff: float, cfg: MapConfig) -> float:
    if s_diff < cfg.s_diff_cap:
        return cfg.k_s * s_diff
    return 1.0


def _weights(v_diff: float, s_diff: float, p_l: float, cfg: MapConfig) -> FusionWeights:
    w_v = view_weight(v_diff, cfg)
    w_s = scale_weight(s_diff, cfg)
    return FusionWeights(v_diff, s_diff, w_v, w_s, (w_v + w_s) / 2 * p_l)


def compute_weights(op: ObjectPoint, S_in: Iterable[SuperPoint], cfg: MapConfig) -> FusionWeights:
    """Novelty weights and incoming score of ``op`` against the superpoints ``S_in``.

    ``v_diff`` is the smallest angle between ``op.view`` and any view stored
    in ``S_in``; ``s_diff`` the smallest octave gap.  An empty ``S_in``
    counts as fully novel (both weights 1).
    """
    v_diff = math.inf
    s_diff = math.inf
    for sp in S_in:
        for v in sp.list_view:
            v_diff = min(v_diff, angular_difference(op.view, v))
        for s in sp.list_scale:
            s_diff = min(s_diff, float(abs(op.scale - s)))
    return _weights(v_diff, s_diff, op.p_l, cfg)


def sigmoid_probability(E_label: float, E_other: float) -> float:
    """Map factor from the best same-label and best other-label scores."""
    if E_label >= E_other:
        return 1.0 / (1.0 + math.exp(E_other - E_label))
    return 0.5


class _Grid:
    """Uniform hash grid over superpoint ids.

    Open-addressing table of packed (i, j, k) cell keys, each pointing to
    a chain of superpoint ids threaded through ``next``.
    """

    def __init__(self, cell_size: float):
        if not cell_size > 0:
            raise ConfigError("grid cell size must be positive")
        self.cell_size = float(cell_size)
        self.keys = np.full(64, _EMPTY, dtype=np.int64)
        self.heads = np.full(64, -1, dtype=np.int64)
        self.occ = np.empty(32, dtype=np.int64)
        self.n_occ = 0
        self.next = np.empty(64, dtype=np.int64)
        self._count = 0

    def key(self, p) -> tuple[int, int, int]:
        cs = self.cell_size
        return (math.floor(p[0] / cs), math.floor(p[1] / cs), math.floor(p[2] / cs))

    def insert(self, idx: int, p) -> None:
        i, j, k = self.key(p)
        if max(abs(i), abs(j), abs(k)) >= _CELL_LIMIT:
            raise InvalidInputError(f"location {tuple(p)} is too far from the origin for the map grid")
        if idx >= self.next.shape[0]:
            self.next = np.concatenate([self.next, np.empty(max(idx + 1, self.next.shape[0]), dtype=np.int64)])
        if 2 * (self.n_occ + 1) > self.keys.shape[0]:
            self.keys, self.heads = grid_rehash(self.occ, self.n_occ, self.keys, self.heads, 2 * self.keys.shape[0])
        if self.n_occ == self.occ.shape[0]:
            self.occ = np.concatenate([self.occ, np.empty_like(self.occ)])
        self.n_occ = grid_insert(self.keys, self.heads, self.occ, self.n_occ, self.next, idx, pack_cell(i, j, k))
        self._count += 1

    def candidates(self, center, radius: float) -> np.ndarray:
        """Ids in every cell the ball touches (a superset of the ball)."""
        out = np.empty(self._count, dtype=np.int64)
        center = np.asarray(center, dtype=np.float64)
        m = grid_query(self.keys, self.heads, self.occ, self.n_occ, self.next, self.cell_size, center, float(radius), out)
        return out[:m]

    def __len__(self) -> int:
        return self._count


class SemanticMap:
    """Superpoint map with a hash-grid spatial index.

    Single writer: ``fuse`` and ``probability`` must be called in frame
    order from one thread.  The grid cell size defaults to the median
    fuse radius of the categories in ``db``.  Views and scales are kept
    in per-superpoint linked lists inside flat arrays.
    """

    def __init__(self, db: ScaleDatabase, config: Optional[MapConfig] = None, cell_size: Optional[float] = None):
        self.db = db
        self.config = config or MapConfig()
        if cell_size is None:
            cell_size = float(np.median([e.fuse_radius for e in db.entries.values()]))
        self._grid = _Grid(cell_size)
        self._radii = [(e.fuse_radius, e.create_radius) for e in db.entries.values()]
        n_labels = len(db)
        cap = 64
        self._n = 0
        self._locs = np.empty((cap, 3))
        self._scores = np.zeros((cap, n_labels))
        self._present = np.zeros((cap, n_labels), dtype=np.bool_)
        self._v_head = np.full(cap, -1, dtype=np.int64)
        self._v_tail = np.full(cap, -1, dtype=np.int64)
        self._s_head = np.full(cap, -1, dtype=np.int64)
        self._s_tail = np.full(cap, -1, dtype=np.int64)
        self._nv = 0
        self._views = np.empty((cap, 3))
        self._v_next = np.empty(cap, dtype=np.int64)
        self._ns = 0
        self._scales = np.empty(cap, dtype=np.int64)
        self._s_next = np.empty(cap, dtype=np.int64)
        self._updated = np.empty(cap, dtype=np.int64)

    @property
    def cell_size(self) -> float:
        return self._grid.cell_size

    def __len__(self) -> int:
        return self._n

    @property
    def locs(self) -> np.ndarray:
        return self._locs[: self._n]

    def _reserve(self, points: int, entries: int) -> None:
        """Make room for ``points`` more superpoints and ``entries`` more views and scales."""
        cap = self._locs.shape[0]
        if self._n + points > cap:
            new = max(2 * cap, self._n + points)
            extra = new - cap
            self._locs = np.concatenate([self._locs, np.empty((extra, 3))])
            self._scores = np.concatenate([self._scores, np.zeros((extra, self._scores.shape[1]))])
            self._present = np.concatenate([self._present, np.zeros((extra, self._present.shape[1]), dtype=np.bool_)])
            for name in ("_v_head", "_v_tail", "_s_head", "_s_tail"):
                setattr(self, name, np.concatenate([getattr(self, name), np.full(extra, -1, dtype=np.int64)]))
            self._updated = np.empty(new, dtype=np.int64)
        if self._nv + entries > self._views.shape[0]:
            new = max(2 * self._views.shape[0], self._nv + entries)
            extra = new - self._views.shape[0]
            self._views = np.concatenate([self._views, np.empty((extra, 3))])
            self._v_next = np.concatenate([self._v_next, np.empty(extra, dtype=np.int64)])
        if self._ns + entries > self._scales.shape[0]:
            new = max(2 * self._scales.shape[0], self._ns + entries)
            extra = new - self._scales.shape[0]
            self._scales = np.concatenate([self._scales, np.empty(extra, dtype=np.int64)])
            self._s_next = np.concatenate([self._s_next, np.empty(extra, dtype=np.int64)])

    def _append_view(self, idx: int, view) -> None:
        self._reserve(0, 1)
        e = self._nv
        self._views[e] = view
        self._v_next[e] = -1
        if self._v_tail[idx] >= 0:
            self._v_next[self._v_tail[idx]] = e
        else:
            self._v_head[idx] = e
        self._v_tail[idx] = e
        self._nv += 1

    def _append_scale(self, idx: int, scale: int) -> None:
        self._reserve(0, 1)
        e = self._ns
        self._scales[e] = scale
        self._s_next[e] = -1
        if self._s_tail[idx] >= 0:
            self._s_next[self._s_tail[idx]] = e
        else:
            self._s_head[idx] = e
        self._s_tail[idx] = e
        self._ns += 1

    def _add(self, loc: np.ndarray) -> int:
        self._reserve(1, 0)
        idx = self._n
        self._locs[idx] = loc
        self._n += 1
        self._grid.insert(idx, loc)
        return idx

    def _within(self, center: np.ndarray, radius: float) -> tuple[np.ndarray, np.ndarray]:
        cand = self._grid.candidates(center, radius)
        if cand.shape[0] == 0:
            return cand, np.empty(0)
        diff = self._locs[cand] - center
        dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
        keep = dist <= radius
        return cand[keep], dist[keep]

    def query_radius(self, center, radius: float) -> set[int]:
        """Ids of all superpoints with ``||loc - center|| <= radius``."""
        if not radius > 0:
            raise InvalidInputError("radius must be positive")
        ids, _ = self._within(np.asarray(center, dtype=np.float64), float(radius))
        return set(ids.tolist())

    def _fuse_raw(self, loc: np.ndarray, col: int, view: np.ndarray, scale: int, p_l: float):
        cfg = self.config
        fuse_r, create_r = self._radii[col]
        grid = self._grid
        self._reserve(1, self._n + 1)
        m, created, v_diff, s_diff, E_in, p_map, nv, ns = fuse_observation(
            self._locs,
            self._n,
            self._scores,
            self._present,
            grid.keys,
            grid.heads,
            grid.occ,
            grid.n_occ,
            grid.next,
            grid.cell_size,
            loc,
            col,
            view,
            scale,
            p_l,
            fuse_r,
            create_r,
            cfg.k_s,
            cfg.s_diff_cap,
            cfg.view_gate_deg,
            cfg.view_cap_deg,
            cfg.reward,
            cfg.append_gate == "pooled",
            self._views,
            self._v_next,
            self._v_head,
            self._v_tail,
            self._nv,
            self._scales,
            self._s_next,
            self._s_head,
            self._s_tail,
            self._ns,
            self._updated,
        )
        self._nv = nv
        self._ns = ns
        if created >= 0:
            self._n += 1
            grid.insert(created, loc)
        return m, created, v_diff, s_diff, E_in, p_map

    def observe(self, loc: np.ndarray, col: int, view: np.ndarray, scale: int, p_l: float) -> float:
        """Fuse one observation given by raw values and return its map factor.

        ``col`` is the scale-database column of the label and ``view`` a
        unit vector.  Equivalent to :meth:`fuse` followed by
        :meth:`probability`.
        """
        return self._fuse_raw(loc, col, view, scale, p_l)[5]

    def fuse(self, op: ObjectPoint) -> FuseOutcome:
        """Fuse ``op`` into the map (score update, list appends, creation)."""
        cfg = self.config
        m, created, v_diff, s_diff, E_in, _ = self._fuse_raw(
            op.loc, self.db.column(op.label), op.view, int(op.scale), float(op.p_l)
        )
        weights = FusionWeights(v_diff, s_diff, view_weight(v_diff, cfg), scale_weight(s_diff, cfg), E_in)
        return FuseOutcome(tuple(sorted(self._updated[:m].tolist())), None if created < 0 else int(created), weights)

    def label_scores(self, center, radius: float, label) -> tuple[float, float]:
        """Best score for ``label`` and best score for any other label within ``radius``."""
        col = self.db.column(label)
        ids, _ = self._within(np.asarray(center, dtype=np.float64), radius)
        if ids.shape[0] == 0:
            return 0.0, 0.0
        sc = self._scores[ids]
        E_label = float(sc[:, col].max())
        sc[:, col] = 0.0
        return E_label, float(sc.max())

    def probability(self, op: ObjectPoint) -> float:
        E_label, E_other = self.label_scores(op.loc, self._radii[self.db.column(op.label)][1], op.label)
        return sigmoid_probability(E_label, E_other)

    def _chain(self, head: int, nxt: np.ndarray) -> list[int]:
        out = []
        e = int(head)
        while e >= 0:
            out.append(e)
            e = int(nxt[e])
        return out

    def superpoint(self, sp_id: int) -> SuperPoint:
        if not 0 <= sp_id < self._n:
            raise KeyError(sp_id)
        cols = np.flatnonzero(self._present[sp_id])
        scores = {self.db.label_id(int(c)): float(self._scores[sp_id, c]) for c in cols}
        views = [self._views[e].copy() for e in self._chain(self._v_head[sp_id], self._v_next)]
        scales = [int(self._scales[e]) for e in self._chain(self._s_head[sp_id], self._s_next)]
        return SuperPoint(sp_id, self._locs[sp_id].copy(), dict(sorted(scores.items())), views, scales)

    def superpoints(self) -> list[SuperPoint]:
        return [self.superpoint(i) for i in range(self._n)]

    def snapshot(self) -> list[dict]:
        """Id-ordered plain-data dump of every superpoint."""
        out = []
        for sp in self.superpoints():
            out.append(
                {
                    "id": sp.id,
                    "loc": sp.loc.tolist(),
                    "scores": [[label, score] for label, score in sp.list_score.items()],
                    "views": [v.tolist() for v in sp.list_view],
                    "scales": list(sp.list_scale),
                }
            )
        return out

    @classmethod
    def from_snapshot(
        cls,
        records: Iterable[dict],
        db: ScaleDatabase,
        config: Optional[MapConfig] = None,
        cell_size: Optional[float] = None,
    ) -> "SemanticMap":
        smap = cls(db, config, cell_size)
        for expected, rec in enumerate(records):
            if rec["id"] != expected:
                raise InvalidInputError(f"superpoint ids must be 0..n-1 in order, got {rec['id']}")
            idx = smap._add(np.asarray(rec["loc"], dtype=np.float64))
            for label, score in rec["scores"]:
                col = db.column(label)
                smap._scores[idx, col] = score
                smap._present[idx, col] = True
            for v in rec["views"]:
                smap._append_view(idx, np.asarray(v, dtype=np.float64))
            for s in rec["scales"]:
                smap._append_scale(idx, int(s))
        return smap


def query_radius(smap: SemanticMap, center, radius: float) -> set[int]:
    return smap.query_radius(center, radius)


def fuse(smap: SemanticMap, op: ObjectPoint, db: Optional[ScaleDatabase] = None) -> FuseOutcome:
    if db is not None and db is not smap.db:
        raise InvalidInputError("map was built for a different scale database")
    return smap.fuse(op)


def map_probability(smap: SemanticMap, op: ObjectPoint, db: Optional[ScaleDatabase] = None) -> float:
    """Map factor for ``op``; call after :func:`fuse` for the same point."""
    if db is not None and db is not smap.db:
        raise InvalidInputError("map was built for a different scale database")
    return smap.probability(op)


def snapshot(smap: SemanticMap) -> list[dict]:
    return smap.snapshot()
