import numpy as np
import pytest

from gridmarket import (
    Congestion,
    DomainError,
    GridTree,
    Load,
    MarketOperator,
    Pv,
    Storage,
    StructureError,
    TimeGrid,
    as_profile,
    sum_profiles,
)

from conftest import make_storage, mo_over


class TestTimeGrid:
    def test_defaults(self):
        grid = TimeGrid(24)
        assert grid.T == 24 and grid.tau == 1.0

    @pytest.mark.parametrize("T", [0, -1, 2.5])
    def test_bad_slot_count(self, T):
        with pytest.raises((StructureError, DomainError)):
            TimeGrid(T)

    def test_bad_tau(self):
        with pytest.raises(DomainError):
            TimeGrid(24, tau=0.0)


class TestProfiles:
    def test_length_check(self):
        with pytest.raises(StructureError):
            as_profile([1.0, 2.0], TimeGrid(3))

    def test_read_only(self):
        arr = as_profile([1.0, 2.0])
        with pytest.raises(ValueError):
            arr[0] = 5.0

    def test_sum_elementwise(self):
        out = sum_profiles([[1.0, 2.0], [3.0, -4.0]], TimeGrid(2))
        assert out.tolist() == [4.0, -2.0]

    def test_empty_sum_is_zero(self):
        assert sum_profiles([], TimeGrid(3)).tolist() == [0.0, 0.0, 0.0]

    def test_length_mismatch(self):
        with pytest.raises(StructureError):
            sum_profiles([[1.0, 2.0], [1.0]], TimeGrid(2))

    def test_exact_for_large_integers(self):
        # integer-valued inputs up to 2**50 sum exactly in float64
        big = float(2**50)
        profiles = [[big, -big], [1.0, 2.0], [2.0, 1.0], [-big, big]]
        assert sum_profiles(profiles, TimeGrid(2)).tolist() == [3.0, 3.0]

    def test_fixed_sum_order_reproducible(self):
        rng = np.random.default_rng(3)
        profiles = [rng.uniform(-1e5, 1e5, 7) for _ in range(40)]
        a = sum_profiles(profiles, TimeGrid(7))
        b = sum_profiles(profiles, TimeGrid(7))
        assert np.array_equal(a, b)


class TestDeviceSpecs:
    def test_pv_rejects_positive_production(self):
        with pytest.raises(DomainError):
            Pv(actual=[10.0], historical_avg=[0.0])

    def test_storage_invariants(self):
        with pytest.raises(DomainError):
            make_storage(e0=-1.0)  # below e_min
        with pytest.raises(DomainError):
            make_storage(x_min=5.0)
        with pytest.raises(DomainError):
            make_storage(eta=0.0)
        with pytest.raises(DomainError):
            make_storage(eta=1.5)
        with pytest.raises(DomainError):
            make_storage(leakage=-1.0)

    def test_heat_pump_shape(self):
        hp = make_storage(x_min=0.0, eta=1.0, leakage=360.0)
        assert hp.x_min == 0.0 and hp.eta == 1.0 and hp.leakage > 0

    def test_congestion_limit_positive(self):
        with pytest.raises(DomainError):
            Congestion(beta=0.0)


class TestGridTree:
    def test_single_device(self):
        tree = mo_over({"l1": Load(actual=[1.0], historical_avg=[1.0])})
        assert tree.devices == ("l1",)
        assert tree.parent_of("l1") == "mo"
        assert tree.preorder == ("mo", "l1")

    def test_two_market_operators_rejected(self):
        with pytest.raises(StructureError):
            GridTree(
                root="mo",
                children={"mo": ("mo2",)},
                kinds={"mo": MarketOperator(), "mo2": MarketOperator()},
            )

    def test_root_must_be_market_operator(self):
        with pytest.raises(StructureError):
            GridTree(root="c", children={}, kinds={"c": Congestion(beta=1.0)})

    def test_device_must_be_leaf(self):
        load = Load(actual=[1.0], historical_avg=[1.0])
        with pytest.raises(StructureError):
            GridTree(
                root="mo",
                children={"mo": ("l1",), "l1": ("l2",)},
                kinds={"mo": MarketOperator(), "l1": load, "l2": load},
            )

    def test_congestion_needs_children(self):
        with pytest.raises(StructureError):
            GridTree(
                root="mo",
                children={"mo": ("c1",)},
                kinds={"mo": MarketOperator(), "c1": Congestion(beta=10.0)},
            )

    def test_two_parents_rejected(self):
        load = Load(actual=[1.0], historical_avg=[1.0])
        with pytest.raises(StructureError):
            GridTree(
                root="mo",
                children={"mo": ("c1", "c2"), "c1": ("l1",), "c2": ("l1",)},
                kinds={
                    "mo": MarketOperator(),
                    "c1": Congestion(beta=10.0),
                    "c2": Congestion(beta=10.0),
                    "l1": load,
                },
            )

    def test_unreachable_node_rejected(self):
        load = Load(actual=[1.0], historical_avg=[1.0])
        with pytest.raises(StructureError):
            GridTree(
                root="mo",
                children={"mo": ("l1",)},
                kinds={"mo": MarketOperator(), "l1": load, "orphan": load},
            )

    def test_subtree_devices_in_child_order(self):
        load = Load(actual=[1.0], historical_avg=[1.0])
        tree = GridTree(
            root="mo",
            children={"mo": ("c1", "l3"), "c1": ("l2", "l1")},
            kinds={
                "mo": MarketOperator(),
                "c1": Congestion(beta=10.0),
                "l1": load,
                "l2": load,
                "l3": load,
            },
        )
        assert tree.subtree_devices("mo") == ("l2", "l1", "l3")
        assert tree.subtree_devices("c1") == ("l2", "l1")
