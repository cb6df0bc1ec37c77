import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from viodet.errors import ConfigError, InvalidInputError
from viodet.geometry import angular_difference
from viodet.semantic_map import (
    MapConfig,
    ObjectPoint,
    SemanticMap,
    SuperPoint,
    compute_weights,
    scale_weight,
    sigmoid_probability,
    view_weight,
)

from conftest import CHAIR, COUCH, DINING_TABLE, OVEN

TOL = 1e-9
CFG = MapConfig()
LABELS = (CHAIR, COUCH, DINING_TABLE, OVEN)


def _op(loc, label=CHAIR, view=(1.0, 0.0, 0.0), scale=1, p_l=0.8):
    return ObjectPoint(np.asarray(loc, dtype=float), label, np.asarray(view, dtype=float), scale, p_l)


def _unit(rng):
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


class ReferenceMap:
    """Plain-Python superpoint map used as an oracle for the compiled path."""

    def __init__(self, db, cfg=CFG):
        self.db = db
        self.cfg = cfg
        self.sps: list[SuperPoint] = []

    def _near(self, loc, radius):
        return [sp for sp in self.sps if float(np.linalg.norm(sp.loc - loc)) <= radius]

    def fuse(self, op):
        entry = self.db.entry(op.label)
        S_in = self._near(op.loc, entry.fuse_radius)
        w = compute_weights(op, S_in, self.cfg)
        pooled = self.cfg.append_gate == "pooled"
        near_any = False
        for sp in S_in:
            near = float(np.linalg.norm(sp.loc - op.loc)) <= entry.create_radius
            near_any |= near
            sp.list_score[op.label] = (sp.list_score.get(op.label, 0.0) + w.E_in) + (self.cfg.reward if near else 0.0)
            own_v = min((angular_difference(op.view, v) for v in sp.list_view), default=math.inf)
            own_s = min((float(abs(op.scale - s)) for s in sp.list_scale), default=math.inf)
            if (w.v_diff if pooled else own_v) >= self.cfg.view_gate_deg:
                sp.list_view.append(op.view.copy())
            if (w.s_diff if pooled else own_s) >= 1.0:
                sp.list_scale.append(op.scale)
        if not near_any:
            self.sps.append(SuperPoint(len(self.sps), op.loc.copy(), {op.label: w.E_in}, [op.view.copy()], [op.scale]))
        return w

    def probability(self, op):
        local = self._near(op.loc, self.db.entry(op.label).create_radius)
        E_label = max((sp.list_score.get(op.label, 0.0) for sp in local), default=0.0)
        E_other = max((s for sp in local for lb, s in sp.list_score.items() if lb != op.label), default=0.0)
        return sigmoid_probability(E_label, E_other)


def _random_stream(rng, n, spread=2.0):
    centers = rng.uniform(-spread, spread, size=(6, 3))
    ops = []
    for _ in range(n):
        c = centers[rng.integers(len(centers))]
        ops.append(
            _op(
                c + rng.normal(0, 0.4, 3),
                LABELS[rng.integers(len(LABELS))],
                _unit(rng),
                int(rng.integers(-2, 5)),
                float(rng.uniform(0.05, 1.0)),
            )
        )
    return ops


class TestWeights:
    def test_view_midpoint(self):
        sp = SuperPoint(0, np.zeros(3), {CHAIR: 1.0}, [np.array([1.0, 0.0, 0.0])], [1])
        v = (math.cos(math.radians(67.5)), math.sin(math.radians(67.5)), 0.0)
        w = compute_weights(_op((0, 0, 0), view=v, scale=1, p_l=0.8), [sp], CFG)
        assert abs(w.w_v - 0.5) <= TOL and abs(w.w_s) <= TOL and abs(w.E_in - 0.2) <= TOL

    def test_small_view_change_and_scale_gap(self):
        assert view_weight(30.0, CFG) == 0.0
        assert abs(scale_weight(2.0, CFG) - 0.4) <= TOL

    def test_empty_neighbourhood(self):
        w = compute_weights(_op((0, 0, 0), p_l=0.9), [], CFG)
        assert w.w_v == 1.0 and w.w_s == 1.0 and abs(w.E_in - 0.9) <= TOL

    def test_breakpoints_continuous(self):
        assert view_weight(45.0, CFG) == 0.0
        assert view_weight(90.0, CFG) == 1.0
        assert abs(view_weight(45.0 + 1e-9, CFG)) < 1e-9
        assert abs(view_weight(90.0 - 1e-9, CFG) - 1.0) < 1e-9
        assert abs(scale_weight(5.0 - 1e-9, CFG) - 1.0) < 1e-9
        assert scale_weight(5.0, CFG) == 1.0

    @settings(max_examples=10_000, deadline=None)
    @given(st.floats(0.0, 180.0), st.floats(0.0, 180.0))
    def test_view_weight_monotone(self, a, b):
        lo, hi = sorted((a, b))
        assert 0.0 <= view_weight(lo, CFG) <= view_weight(hi, CFG) <= 1.0

    def test_config_constants(self):
        assert (CFG.k_s, CFG.s_diff_cap, CFG.view_gate_deg, CFG.view_cap_deg) == (0.2, 5.0, 45.0, 90.0)

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            MapConfig(k_s=0.25)
        with pytest.raises(ConfigError):
            MapConfig(view_gate_deg=90.0, view_cap_deg=45.0)
        with pytest.raises(ConfigError):
            MapConfig(append_gate="sometimes")


class TestSigmoid:
    def test_equal_scores(self):
        assert sigmoid_probability(1.7, 1.7) == 0.5

    def test_label_ahead(self):
        assert abs(sigmoid_probability(3.0, 1.0) - 1.0 / (1.0 + math.exp(-2.0))) <= TOL
        assert abs(sigmoid_probability(3.0, 1.0) - 0.880797) < 1e-6

    def test_label_behind(self):
        assert sigmoid_probability(1.0, 3.0) == 0.5


class TestFuse:
    def test_empty_map_creates(self, db):
        smap = SemanticMap(db)
        out = smap.fuse(_op((0, 0, 0), p_l=0.8))
        assert out.created == 0 and out.updated == ()
        assert len(smap) == 1
        assert smap.superpoint(0).list_score == {CHAIR: pytest.approx(0.8, abs=TOL)}

    def test_reobserved_from_opposite_side(self, db):
        smap = SemanticMap(db)
        smap.fuse(_op((0, 0, 0), view=(1, 0, 0), p_l=0.8))
        out = smap.fuse(_op((0, 0, 0), view=(-1, 0, 0), p_l=0.8))
        assert out.created is None and len(smap) == 1
        assert abs(out.weights.w_v - 1.0) <= TOL and out.weights.w_s == 0.0
        # 0.8 + 0.5 * 0.8 + reward 1
        assert abs(smap.superpoint(0).list_score[CHAIR] - 2.2) <= TOL

    def test_between_radii_updates_and_creates(self, db):
        smap = SemanticMap(db)
        smap.fuse(_op((0, 0, 0), view=(1, 0, 0), p_l=0.8))
        out = smap.fuse(_op((1.0, 0, 0), view=(-1, 0, 0), p_l=0.8))
        assert out.updated == (0,) and out.created == 1
        # E_in only, no reward: 0.8 + 0.4
        assert abs(smap.superpoint(0).list_score[CHAIR] - 1.2) <= TOL
        assert abs(smap.superpoint(1).list_score[CHAIR] - 0.4) <= TOL

    def test_probability_after_fusion(self, db):
        smap = SemanticMap(db)
        smap.fuse(_op((0, 0, 0), label=COUCH, p_l=0.9))
        op = _op((0, 0, 0), label=CHAIR, view=(-1, 0, 0), p_l=0.8)
        smap.fuse(op)
        # the couch keeps 0.9 while the chair arrives with E_in 0.4 + reward 1
        assert abs(smap.probability(op) - sigmoid_probability(1.4, 0.9)) <= TOL

    def test_kernel_matches_reference(self, db):
        rng = np.random.default_rng(42)
        for gate in ("per_superpoint", "pooled"):
            cfg = MapConfig(append_gate=gate)
            for _ in range(20):
                smap, ref = SemanticMap(db, cfg), ReferenceMap(db, cfg)
                for op in _random_stream(rng, 60):
                    out = smap.fuse(op)
                    w = ref.fuse(op)
                    assert abs(out.E_in - w.E_in) <= 1e-12
                    assert out.weights.v_diff == pytest.approx(w.v_diff, abs=1e-9)
                    assert out.weights.s_diff == w.s_diff
                    assert abs(smap.probability(op) - ref.probability(op)) <= 1e-12
                got = smap.superpoints()
                assert len(got) == len(ref.sps)
                for a, b in zip(got, ref.sps):
                    np.testing.assert_array_equal(a.loc, b.loc)
                    assert a.list_score.keys() == b.list_score.keys()
                    for k in a.list_score:
                        assert abs(a.list_score[k] - b.list_score[k]) <= 1e-12
                    np.testing.assert_array_equal(np.array(a.list_view).reshape(-1, 3), np.array(b.list_view).reshape(-1, 3))
                    assert a.list_scale == b.list_scale

    def test_observe_equals_fuse_then_probability(self, db):
        rng = np.random.default_rng(42)
        stream = _random_stream(rng, 300)
        a, b = SemanticMap(db), SemanticMap(db)
        for op in stream:
            p_obs = a.observe(op.loc, db.column(op.label), op.view, op.scale, op.p_l)
            b.fuse(op)
            assert p_obs == b.probability(op)
        assert a.snapshot() == b.snapshot()

    def test_rejects_bad_object_point(self):
        with pytest.raises(InvalidInputError):
            _op((0, 0, 0), view=(1.0, 1.0, 0.0))
        with pytest.raises(InvalidInputError):
            _op((0, 0, 0), p_l=0.0)


class TestQueryRadius:
    def test_empty(self, db):
        assert SemanticMap(db).query_radius((0, 0, 0), 1.0) == set()

    def test_inclusive_boundary(self, db):
        smap = SemanticMap(db)
        smap.fuse(_op((1.0, 0.0, 0.0)))
        assert smap.query_radius((0, 0, 0), 1.0) == {0}

    def test_matches_linear_scan(self, db):
        rng = np.random.default_rng(42)
        for cell in (0.25, 1.0, None):
            smap = SemanticMap(db, cell_size=cell)
            for p in rng.uniform(-5, 5, size=(100, 3)):
                smap._add(p)
            for _ in range(50):
                c = rng.uniform(-6, 6, 3)
                r = float(rng.uniform(0.05, 12.0))
                ref = {i for i, p in enumerate(smap.locs) if np.linalg.norm(p - c) <= r}
                assert smap.query_radius(c, r) == ref

    def test_rejects_nonpositive_radius(self, db):
        with pytest.raises(InvalidInputError):
            SemanticMap(db).query_radius((0, 0, 0), 0.0)


class TestMapInvariants:
    """Randomized streams, checked after every fusion (10,000 fusions in total)."""

    N_MAPS = 50
    N_OPS = 200

    def test_stream_invariants(self, db):
        rng = np.random.default_rng(42)
        checked = 0
        for _ in range(self.N_MAPS):
            smap = SemanticMap(db)
            for op in _random_stream(rng, self.N_OPS, spread=float(rng.uniform(0.5, 4.0))):
                before = smap._scores[: len(smap)].copy()
                smap.fuse(op)
                after = smap._scores[: before.shape[0]]
                assert np.all(after >= before)
                p_map = smap.probability(op)
                assert 0.5 <= p_map < 1.0
                assert smap.query_radius(op.loc, db.create_radius(op.label))
                checked += 1
            for sp in smap.superpoints():
                views = sp.list_view
                for i in range(len(views)):
                    for j in range(i):
                        assert angular_difference(views[i], views[j]) >= CFG.view_gate_deg
                scales = sp.list_scale
                assert all(abs(a - b) >= 1 for i, a in enumerate(scales) for b in scales[:i])
        assert checked >= 10_000

    def test_deterministic(self, db):
        stream = _random_stream(np.random.default_rng(42), 500)
        snaps = []
        for _ in range(2):
            smap = SemanticMap(db)
            for op in stream:
                smap.fuse(op)
            snaps.append(smap.snapshot())
        assert snaps[0] == snaps[1]


class TestSnapshot:
    def test_empty(self, db):
        assert SemanticMap(db).snapshot() == []

    def test_single(self, db):
        smap = SemanticMap(db)
        smap.fuse(_op((0, 0, 0)))
        (rec,) = smap.snapshot()
        assert set(rec) == {"id", "loc", "scores", "views", "scales"}
        assert rec["scores"] == [[CHAIR, pytest.approx(0.8)]] and len(rec["views"]) == 1 and rec["scales"] == [1]

    def test_restore(self, db):
        smap = SemanticMap(db)
        for op in _random_stream(np.random.default_rng(42), 200):
            smap.fuse(op)
        again = SemanticMap.from_snapshot(smap.snapshot(), db)
        assert again.snapshot() == smap.snapshot()
        op = _op((0.1, 0.2, 0.3), label=COUCH)
        assert again.fuse(op).E_in == smap.fuse(op).E_in
