import io
import math

import numpy as np
import pytest

from pwscontract.model import Mode, PwsSystem, TopologyError, locate
from pwscontract.filippov import (
    EscapingRegionError,
    SolverOptions,
    classify_boundary,
    integrate,
    lie_derivative,
    sliding_coefficient,
    sliding_field,
    write_trajectory_csv,
)

from conftest import make_system


class TestLieDerivative:
    def test_example1_field1_at_origin(self, ex1):
        assert lie_derivative(ex1.manifolds[0], ex1.f(1, [0.0, 0.0]),
                              [0.0, 0.0]) == 3.0

    def test_orthogonal_field(self, ex1):
        assert lie_derivative(ex1.manifolds[0], [0.0, 7.0], [0.0, 1.0]) == 0.0

    def test_unit_normal_field(self, ex1):
        g = ex1.manifolds[0].grad([0.0, 0.0])  # unit normal (1, 0)
        assert lie_derivative(ex1.manifolds[0], g, [0.0, 0.0]) == 1.0


class TestClassifyBoundary:
    def test_crossing(self, ex1):
        cls = classify_boundary(ex1, 0, [0.0, 0.0])
        assert cls.kind == "crossing"
        assert (cls.sigma_i, cls.sigma_j) == (3.0, 1.0)

    def test_sliding(self, ex1):
        cls = classify_boundary(ex1, 0, [0.0, -2.0])
        assert cls.kind == "sliding"
        assert (cls.sigma_i, cls.sigma_j) == (1.0, -1.0)

    def test_escaping_on_swapped_fields(self, swapped_ex1):
        assert classify_boundary(swapped_ex1, 0, [0.0, -2.0]).kind == "escaping"

    def test_tangential_resolves_to_sliding(self, ex1):
        # sigma_j = x2 + 1 vanishes at the sliding-exit point
        cls = classify_boundary(ex1, 0, [0.0, -1.0])
        assert cls.kind == "sliding"
        raw = classify_boundary(ex1, 0, [0.0, -1.0], resolve_tangential=False)
        assert raw.kind == "tangential"

    def test_both_zero_raises(self):
        system = make_system({
            "dimension": 2, "topology": "chain",
            "modes": [{"A": [[0, 0], [0, 0]], "b": [0, 1]}] * 2,
            "manifolds": [{"c": [1.0, 0.0], "d": 0.0}],
            "box": {"lower": [-1, -1], "upper": [1, 1]},
        })
        with pytest.raises(TopologyError, match="transversality"):
            classify_boundary(system, 0, [0.0, 0.0])


class TestSlidingCoefficient:
    def test_symmetric(self):
        assert sliding_coefficient(1.0, -1.0) == 0.5

    def test_asymmetric(self):
        assert sliding_coefficient(2.0, -6.0) == 0.25

    def test_rejects_crossing_configuration(self):
        with pytest.raises(ValueError, match="sliding configuration"):
            sliding_coefficient(3.0, 3.0)

    def test_zero_residual(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            si = float(rng.uniform(0.01, 10))
            sj = float(-rng.uniform(0.01, 10))
            lam = sliding_coefficient(si, sj)
            assert 0.0 < lam < 1.0
            scale = max(abs(si), abs(sj))
            assert (1 - lam) * si + lam * sj == pytest.approx(0.0, abs=1e-14 * scale)


class TestSlidingField:
    def test_example1_midband(self, ex1):
        fs = sliding_field(ex1, 1, 2, [0.0, -2.0])
        assert np.allclose(fs, [0.0, 2.0], atol=1e-14)

    def test_tangency_normal_component_vanishes(self, ex1):
        rng = np.random.default_rng(4)
        for _ in range(50):
            x = np.array([0.0, rng.uniform(-2.9, -1.1)])
            fs = sliding_field(ex1, 1, 2, x)
            g = ex1.manifolds[0].grad(x)
            assert abs(np.dot(g, fs)) <= 1e-12 * max(1.0, np.linalg.norm(fs))

    def test_exit_point_gives_other_field(self, ex1):
        # sigma_j = 0 there: lambda = 1 and the sliding vector equals f_2
        fs = sliding_field(ex1, 1, 2, [0.0, -1.0])
        assert np.allclose(fs, ex1.f(2, [0.0, -1.0]), atol=1e-14)
        assert np.allclose(fs, [0.0, 1.0], atol=1e-14)

    def test_equal_tangent_fields(self):
        system = make_system({
            "dimension": 2, "topology": "chain",
            "modes": [{"A": [[0, 0], [0, 0]], "b": [0, 1]}] * 2,
            "manifolds": [{"c": [1.0, 0.0], "d": 0.0}],
            "box": {"lower": [-1, -1], "upper": [1, 1]},
        })
        assert np.allclose(sliding_field(system, 1, 2, [0.0, 0.0]), [0.0, 1.0])

    def test_wrong_order_raises(self, ex1):
        with pytest.raises(ValueError, match="mode order"):
            sliding_field(ex1, 2, 1, [0.0, -2.0])

    def test_escaping_raises(self, swapped_ex1):
        with pytest.raises(ValueError, match="escaping"):
            sliding_field(swapped_ex1, 1, 2, [0.0, -2.0])


class TestIntegrateExample1:
    def test_slides_then_converges(self, ex1):
        traj = integrate(ex1, [-3.0, -4.0], 20.0)
        assert np.linalg.norm(traj.final_state - [0.5, 0.0]) < 1e-4
        slides = [s for s in traj.segments if s.kind == "slide"]
        assert len(slides) == 1
        assert slides[0].manifold == "sigma_1_2"
        assert slides[0].pair == (1, 2)

    def test_stationary_at_equilibrium(self, ex1):
        traj = integrate(ex1, [0.5, 0.0], 20.0)
        assert np.max(np.linalg.norm(traj.states - [0.5, 0.0], axis=1)) <= 1e-9

    def test_upper_manifold_slide(self, ex1):
        traj = integrate(ex1, [5.0, 5.0], 20.0)
        slides = [s for s in traj.segments if s.kind == "slide"]
        assert any(s.manifold == "sigma_2_3" for s in slides)
        assert np.linalg.norm(traj.final_state - [0.5, 0.0]) < 1e-4

    def test_segments_tile_time_range(self, ex1):
        traj = integrate(ex1, [-3.0, -4.0], 5.0)
        pieces = [s for s in traj.segments if s.kind != "cross"]
        assert pieces[0].t_start == 0.0
        assert pieces[-1].t_end == pytest.approx(5.0, abs=1e-12)
        for a, b in zip(pieces, pieces[1:]):
            assert a.t_end == pytest.approx(b.t_start, abs=1e-12)

    def test_samples_strictly_increasing(self, ex1):
        traj = integrate(ex1, [-3.0, -4.0], 5.0)
        assert np.all(np.diff(traj.times) > 0)

    def test_sliding_consistency(self, ex1):
        # on slide samples: on the manifold, lambda in [0, 1], tangent motion
        traj = integrate(ex1, [-3.0, -4.0], 5.0)
        man = ex1.manifolds[0]
        sid = next(i for i, s in enumerate(traj.segments) if s.kind == "slide")
        mask = traj.seg_index == sid
        for x, lam in zip(traj.states[mask], traj.lambdas[mask]):
            assert abs(man.h(x)) <= 1e-9
            assert -1e-12 <= lam <= 1.0 + 1e-12
            fs = sliding_field(ex1, 1, 2, x)
            assert abs(np.dot(man.grad(x), fs)) <= 1e-8

    def test_event_localization(self, ex1):
        traj = integrate(ex1, [-3.0, 2.0], 5.0)  # crossing-rich start
        crosses = [s for s in traj.segments if s.kind == "cross"]
        assert crosses
        for seg in crosses:
            sid = traj.segments.index(seg)
            pts = traj.states[traj.seg_index == sid]
            man = next(m for m in ex1.manifolds if m.label == seg.manifold)
            for x in pts:
                assert abs(man.h(x)) <= 1e-10


class TestIntegrateExample2:
    def test_converges_to_equilibrium(self, ex2):
        traj = integrate(ex2, [-2.0, -2.0], 20.0)
        assert np.linalg.norm(traj.final_state - [1.1, 0.45]) < 1e-4

    def test_sliding_occurs_from_suitable_start(self, ex2):
        traj = integrate(ex2, [-0.3, 2.0], 20.0)
        assert traj.has_sliding()
        assert np.linalg.norm(traj.final_state - [1.1, 0.45]) < 1e-4

    def test_crossing_through_intersection(self):
        system = make_system({
            "dimension": 2, "topology": "planar_cross",
            "modes": [{"A": [[0, 0], [0, 0]], "b": [1.0, 1.0]}] * 4,
            "manifolds": [{"c": [0.0, 1.0], "d": 0.0}, {"c": [1.0, 0.0], "d": 0.0}],
            "box": {"lower": [-5, -5], "upper": [5, 5]},
        })
        traj = integrate(system, [-1.0, -1.0], 2.0)
        assert np.allclose(traj.final_state, [1.0, 1.0], atol=1e-9)
        crosses = [s for s in traj.segments if s.kind == "cross"]
        assert len(crosses) == 1
        assert crosses[0].pair == (4, 2)
        assert crosses[0].manifold == "sigma_1&sigma_2"

    def test_intersection_without_common_sector_halts(self):
        from pwscontract.filippov import IntersectionAssumptionError

        # mode 3's field disagrees with the others at the origin, and the
        # flow from the third quadrant runs straight into the intersection
        bs = ([1.0, 1.0], [1.0, 1.0], [1.0, -1.0], [1.0, 1.0])
        system = make_system({
            "dimension": 2, "topology": "planar_cross",
            "modes": [{"A": [[0, 0], [0, 0]], "b": list(b)} for b in bs],
            "manifolds": [{"c": [0.0, 1.0], "d": 0.0}, {"c": [1.0, 0.0], "d": 0.0}],
            "box": {"lower": [-5, -5], "upper": [5, 5]},
        })
        with pytest.raises(IntersectionAssumptionError):
            integrate(system, [-1.0, -1.0], 3.0)


class TestIntegrateEdgeCases:
    def test_zero_duration(self, ex1):
        traj = integrate(ex1, [-3.0, -4.0], 0.0)
        assert len(traj.times) == 1
        assert np.array_equal(traj.states[0], [-3.0, -4.0])

    def test_escaping_halts(self, swapped_ex1):
        with pytest.raises(EscapingRegionError):
            integrate(swapped_ex1, [0.0, -2.0], 1.0)

    def test_outside_box_rejected(self, ex1):
        with pytest.raises(ValueError, match="analysis box"):
            integrate(ex1, [9.0, 0.0], 1.0)

    def test_negative_duration_rejected(self, ex1):
        with pytest.raises(ValueError, match="nonnegative"):
            integrate(ex1, [1.0, 0.0], -1.0)

    def test_single_mode_matches_exact_flow(self, single_mode):
        traj = integrate(single_mode, [1.0, 1.0], 1.0)
        assert np.allclose(traj.final_state, np.exp(-1.0) * np.ones(2), atol=1e-10)

    def test_start_on_crossing_boundary(self, ex1):
        traj = integrate(ex1, [0.0, 0.0], 1.0)
        assert locate(ex1, traj.final_state).mode == 2


class TestNumericalBehavior:
    def test_matches_closed_form_solution(self, ex1):
        # from (-3, -4) the piecewise-linear dynamics solve in closed form:
        # mode 1 gives x1(t) = 3 - (6 + 4t) exp(-t), x2(t) = -4 exp(-t); the
        # boundary hit at x1 = 0 starts a slide with d/dt x2 = -x2 that ends
        # when x2 reaches -1, i.e. at t = ln 4; mode 2 then flows from (0, -1)
        from scipy.optimize import brentq

        t_hit = brentq(lambda t: 3.0 - (6.0 + 4.0 * t) * math.exp(-t),
                       1.0, 2.0, xtol=1e-14)
        t_exit = math.log(4.0)
        t_f = 2.0
        s = t_f - t_exit
        x_exact = np.array([0.5 - math.exp(-s) + 0.5 * math.exp(-2.0 * s),
                            -math.exp(-s)])
        traj = integrate(ex1, [-3.0, -4.0], t_f)
        kinds = [(seg.kind, seg.t_start, seg.t_end) for seg in traj.segments]
        assert [k for k, _, _ in kinds] == ["flow", "slide", "flow"]
        assert kinds[1][1] == pytest.approx(t_hit, abs=1e-9)
        assert kinds[1][2] == pytest.approx(t_exit, abs=1e-7)
        assert np.linalg.norm(traj.final_state - x_exact) < 1e-8

    def test_refinement_order_across_events(self, ex1):
        # flow -> boundary hit -> slide -> exit within t=1.6 from this start;
        # steps large enough that truncation error sits above rounding noise
        finals = {}
        for h in (8e-3, 4e-3, 2e-3):
            opts = SolverOptions(step=h)
            finals[h] = integrate(ex1, [-0.5, -3.0], 1.6, opts).final_state
        e1 = np.linalg.norm(finals[8e-3] - finals[4e-3])
        e2 = np.linalg.norm(finals[4e-3] - finals[2e-3])
        assert e2 > 1e-14, "errors collapsed to rounding noise"
        assert math.log2(e1 / e2) >= 3.0

    def test_generic_path_matches_affine_fast_path(self, ex1):
        handles = [
            Mode.from_handles(m.index,
                              lambda x, A=m.affine.A, b=m.affine.b: A @ x + b,
                              lambda x, A=m.affine.A: A)
            for m in ex1.modes
        ]
        generic = PwsSystem(2, "chain", handles, ex1.manifolds, ex1.box)
        assert not generic.is_affine
        ta = integrate(ex1, [-3.0, -4.0], 5.0)
        tb = integrate(generic, [-3.0, -4.0], 5.0)
        m = min(len(ta.times), len(tb.times))
        assert np.allclose(ta.times[:m], tb.times[:m], atol=1e-9)
        assert np.max(np.abs(ta.states[:m] - tb.states[:m])) < 1e-8


class TestTrajectoryCsv:
    def test_schema_and_lambda_column(self, ex1):
        traj = integrate(ex1, [-3.0, -4.0], 3.0)
        buf = io.StringIO()
        write_trajectory_csv(traj, buf)
        lines = buf.getvalue().strip().split("\n")
        assert lines[0] == "t,x1,x2,segment,mode_or_pair,lambda"
        assert len(lines) == len(traj.times) + 1
        for line in lines[1:]:
            parts = line.split(",")
            assert len(parts) == 6
            if parts[3] == "slide":
                assert parts[4] == "1-2"
                assert 0.0 <= float(parts[5]) <= 1.0
            else:
                assert parts[5] == ""

    def test_roundtrip_values(self, ex1):
        traj = integrate(ex1, [1.0, 1.0], 1.0)
        buf = io.StringIO()
        write_trajectory_csv(traj, buf)
        rows = [line.split(",") for line in buf.getvalue().strip().split("\n")[1:]]
        ts = np.array([float(r[0]) for r in rows])
        xs = np.array([[float(r[1]), float(r[2])] for r in rows])
        assert np.array_equal(ts, traj.times)
        assert np.array_equal(xs, traj.states)
