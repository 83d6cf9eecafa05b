import numpy as np
import pytest

from gridmarket import (
    Congestion,
    GridTree,
    Load,
    MarketOperator,
    NegotiationParams,
    PriceSearchState,
    StructureError,
    TimeGrid,
    adjust_prices,
    congestion_error,
    negotiate,
    negotiate_root,
    storage_response,
    target_error,
)

from conftest import make_storage, mo_over


class TestErrors:
    def test_target_error(self):
        out = target_error([100.0, 200.0], [100.0, 150.0])
        assert out.tolist() == [0.0, 50.0]

    def test_target_met(self):
        assert target_error([5.0, 5.0], [5.0, 5.0]).tolist() == [0.0, 0.0]

    def test_production_surplus_is_negative(self):
        assert target_error([-50.0], [0.0]).tolist() == [-50.0]

    def test_target_length_mismatch(self):
        with pytest.raises(StructureError):
            target_error([1.0], [1.0, 2.0])

    def test_consumption_overload(self):
        assert congestion_error([35000.0], 30000.0).tolist() == [5000.0]

    def test_production_overload_keeps_sign(self):
        assert congestion_error([-35000.0], 30000.0).tolist() == [-5000.0]

    def test_inside_limits(self):
        assert congestion_error([12000.0], 30000.0).tolist() == [0.0]


class TestAdjustPrices:
    def _state(self, T=1):
        return PriceSearchState(T, NegotiationParams())

    def test_secant_interpolation(self):
        state = self._state()
        state.record(np.array([0.5]), np.array([1000.0]))
        state.record(np.array([0.6]), np.array([-1000.0]))
        out = adjust_prices(state, np.array([-1000.0]))
        assert out[0] == pytest.approx(0.55)

    def test_probe_direction_opposes_error(self):
        state = self._state()
        state.record(np.array([0.5]), np.array([2000.0]))
        out = adjust_prices(state, np.array([2000.0]))
        assert out[0] == pytest.approx(0.6)

    def test_converged_slot_keeps_price(self):
        state = self._state()
        state.record(np.array([0.37]), np.array([0.0]))
        out = adjust_prices(state, np.array([0.0]))
        assert out[0] == 0.37

    def test_zero_slope_falls_back_to_probe(self):
        state = self._state()
        state.record(np.array([0.5]), np.array([800.0]))
        state.record(np.array([0.6]), np.array([800.0]))
        out = adjust_prices(state, np.array([800.0]))
        assert out[0] == pytest.approx(0.7)

    def test_clamped_to_unit_interval(self):
        state = self._state()
        state.record(np.array([0.95]), np.array([10.0]))
        state.record(np.array([0.99]), np.array([5.0]))
        out = adjust_prices(state, np.array([5.0]))
        assert out[0] == 1.0

    def test_boundary_stall_probes_back(self):
        # secant slope points past the boundary: fall back to a probe
        state = self._state()
        state.record(np.array([0.9999]), np.array([-13000.0]))
        state.record(np.array([1.0]), np.array([-12880.0]))
        out = adjust_prices(state, np.array([-12880.0]))
        assert out[0] == pytest.approx(0.9)


class TestNegotiate:
    def test_load_matching_target_converges_immediately(self, grid24, params):
        actual = np.linspace(100, 2400, 24)
        tree = mo_over({"l1": Load(actual=actual, historical_avg=actual)})
        out, trace = negotiate_root(tree, actual, grid24, params)
        assert out.converged
        assert out.iterations == 1
        assert np.array_equal(out.local_prices, np.full(24, 0.5))

    def test_storage_secant_exact_with_hand_inversion(self, params):
        grid = TimeGrid(3)
        spec = make_storage(
            eta=1.0, x_max=2000.0, x_min=-2000.0, e_min=-1e9, e_max=1e9, e0=0.0,
            ramp_width=0.25,
        )
        tree = mo_over({"s1": spec})
        theta = np.array([500.0, -700.0, 0.0])
        out, _ = negotiate_root(tree, theta, grid, params)
        assert out.converged
        assert out.iterations <= 3
        assert np.max(np.abs(out.residual_error)) <= 1e-3
        # invert the linear ramps by hand: 0.5 - w*theta/x_max on the charge
        # side, 0.5 + w*theta/x_min on the discharge side
        expected = np.array([0.5 - 0.25 * 500.0 / 2000.0,
                             0.5 + 0.25 * (-700.0) / (-2000.0),
                             0.5])
        assert out.local_prices == pytest.approx(expected, abs=1e-9)
        assert out.program == pytest.approx(theta, abs=1e-3)

    def test_congestion_capped_and_prices_local(self, params):
        grid = TimeGrid(4)
        inner = make_storage(eta=1.0, x_max=4000.0, x_min=-4000.0,
                             e_min=-1e9, e_max=1e9, e0=0.0)
        outer = make_storage(eta=0.9, x_max=4000.0, x_min=-4000.0,
                             e_min=-1e9, e_max=1e9, e0=0.0)
        tree = GridTree(
            root="mo",
            children={"mo": ("co", "b_out"), "co": ("a_in",)},
            kinds={"mo": MarketOperator(), "co": Congestion(beta=2000.0),
                   "a_in": inner, "b_out": outer},
        )
        theta = np.array([3000.0, 3000.0, 0.0, -2800.0])
        out, trace = negotiate_root(tree, theta, grid, params)
        assert out.converged
        co = trace["co"]
        assert np.max(np.abs(co.program)) <= 2000.0 + 1e-3
        # brute check: the returned program satisfies the congestion rule
        assert np.max(np.abs(congestion_error(co.program, 2000.0))) <= 1e-3
        mo_prices = trace["mo"].local_prices
        for t in range(4):
            if t in co.violated_slots:
                assert co.local_prices[t] != mo_prices[t]
            else:
                assert co.local_prices[t] == mo_prices[t]
        assert sorted(co.violated_slots) == [0, 1, 3]

    def test_nested_containment_regardless_of_parent(self, params):
        # target unreachable (no flexibility outside), congestion still met
        grid = TimeGrid(2)
        inner = make_storage(eta=1.0, x_max=4000.0, x_min=-4000.0,
                             e_min=-1e9, e_max=1e9, e0=0.0)
        tree = GridTree(
            root="mo",
            children={"mo": ("co",), "co": ("a_in",)},
            kinds={"mo": MarketOperator(), "co": Congestion(beta=1000.0),
                   "a_in": inner},
        )
        theta = np.array([3000.0, 3000.0])
        fast = NegotiationParams(max_iters=60)
        out, trace = negotiate_root(tree, theta, grid, fast)
        assert not out.converged
        assert np.max(np.abs(trace["co"].program)) <= 1000.0 + 1e-3

    def test_exhausted_budget_reports_failure(self, params):
        grid = TimeGrid(1)
        tree = mo_over({"l1": Load(actual=[100.0], historical_avg=[100.0])})
        out, _ = negotiate_root(tree, np.array([500.0]), grid,
                                NegotiationParams(max_iters=5))
        assert not out.converged
        assert out.iterations <= 5

    def test_price_locality_untouched_slots(self, params):
        grid = TimeGrid(3)
        load = Load(actual=[100.0, 5000.0, 100.0], historical_avg=[0.0] * 3)
        tree = GridTree(
            root="mo",
            children={"mo": ("co",), "co": ("l1",)},
            kinds={"mo": MarketOperator(), "co": Congestion(beta=1000.0),
                   "l1": load},
        )
        out, trace = negotiate_root(tree, np.array([100.0, 5000.0, 100.0]),
                                    grid, NegotiationParams(max_iters=40))
        co = trace["co"]
        assert sorted(co.violated_slots) == [1]
        assert co.local_prices[0] == trace["mo"].local_prices[0]
        assert co.local_prices[2] == trace["mo"].local_prices[2]

    def test_monotone_aggregate_under_price_raise(self):
        rng = np.random.default_rng(11)
        grid = TimeGrid(6)
        for _ in range(40):
            spec = make_storage(
                eta=rng.uniform(0.5, 1.0),
                x_max=rng.uniform(100, 3000),
                x_min=-rng.uniform(100, 3000),
                e_min=0.0,
                e_max=rng.uniform(2000, 20000),
                e0=rng.uniform(0, 2000),
                leakage=rng.uniform(0, 50),
            )
            prices = rng.uniform(0.0, 0.95, 6)
            slot = int(rng.integers(0, 6))
            raised = prices.copy()
            raised[slot] = min(1.0, prices[slot] + rng.uniform(0.01, 0.3))
            before = storage_response(spec, prices, grid).program[slot]
            after = storage_response(spec, raised, grid).program[slot]
            assert after <= before + 1e-9

    def test_bit_identical_reruns(self, grid24, params):
        spec = make_storage(eta=0.9, x_max=3000.0, x_min=-3000.0,
                            e_min=0.0, e_max=20000.0, e0=10000.0)
        load = Load(actual=np.full(24, 800.0), historical_avg=np.full(24, 700.0))
        tree = mo_over({"l1": load, "s1": spec})
        theta = np.full(24, 600.0)
        out1, tr1 = negotiate_root(tree, theta, grid24, params)
        out2, tr2 = negotiate_root(tree, theta, grid24, params)
        assert np.array_equal(out1.program, out2.program)
        assert np.array_equal(out1.local_prices, out2.local_prices)
        assert out1.iterations == out2.iterations
        for node in tr1:
            assert np.array_equal(tr1[node].program, tr2[node].program)


class TestLinearConvergenceProperty:
    def test_two_secant_evaluations_after_probe(self):
        # all-linear response: probe then one exact secant step per slot
        grid = TimeGrid(24)
        spec = make_storage(
            eta=1.0, x_max=2000.0, x_min=-2000.0, e_min=-1e9, e_max=1e9,
            e0=0.0, ramp_width=0.25,
        )
        tree = mo_over({"s1": spec})
        rng = np.random.default_rng(5)
        for _ in range(10):
            theta = rng.uniform(-1900.0, 1900.0, 24)
            out, _ = negotiate_root(tree, theta, grid, NegotiationParams())
            assert out.converged
            assert out.iterations <= 3
