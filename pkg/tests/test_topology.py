import numpy as np
import pytest

from pmisim.config import Scenario
from pmisim.errors import ConfigError, DomainError
from pmisim.topology import (
    Topology,
    build_layout,
    hex_site_positions,
    pathloss_uma,
    rsrp,
    sector_boresights,
    sector_gain,
)


def test_pathloss_at_500m():
    assert pathloss_uma(500.0) == pytest.approx(98.76, abs=0.05)


def test_pathloss_monotone_and_nlos_above_los():
    distances = [10.0, 35.0, 100.0, 500.0, 1000.0, 5000.0]
    los = [pathloss_uma(d) for d in distances]
    assert los == sorted(los)
    for d in distances:
        assert pathloss_uma(d, los=False) >= pathloss_uma(d, los=True)


def test_pathloss_domain():
    with pytest.raises(DomainError):
        pathloss_uma(5.0)
    with pytest.raises(DomainError):
        pathloss_uma(6000.0)


def test_rsrp_link_budget():
    assert rsrp(43.0, 98.76, 0.0, 0.0) == pytest.approx(-55.76)


def test_sector_pattern():
    assert sector_gain(30.0, 30.0) == pytest.approx(0.0)
    assert sector_gain(30.0 + 32.5, 30.0) == pytest.approx(-3.0)
    assert sector_gain(210.0, 30.0) == pytest.approx(-30.0)
    assert sector_gain(123.0, None) == 0.0


def test_hex_grid():
    sites = hex_site_positions(7, 500.0)
    assert sites.shape == (7, 2)
    assert np.allclose(sites[0], 0.0)
    assert np.allclose(np.linalg.norm(sites[1:], axis=1), 500.0)
    assert len(hex_site_positions(19, 500.0)) == 19
    with pytest.raises(ConfigError):
        hex_site_positions(4, 500.0)


def test_boresights():
    assert sector_boresights(3) == [30.0, 150.0, 270.0]
    assert sector_boresights(1) == [None]


def test_single_site_layout():
    cells, ues, drop = build_layout(Scenario(num_sites=1, ues_per_cell=10))
    assert len(cells) == 3
    assert ues.shape == (30, 2)
    assert sorted(np.bincount(drop)) == [10, 10, 10]
    assert np.all(np.linalg.norm(ues, axis=1) >= 35.0)


def test_nineteen_sites():
    cells, ues, _ = build_layout(Scenario(num_sites=19, ues_per_cell=1))
    assert len(cells) == 57
    assert [c.pci for c in cells] == list(range(57))
    assert len(ues) == 57


def test_unsupported_site_count():
    with pytest.raises(ConfigError):
        Topology(Scenario(num_sites=2))


def test_layout_is_deterministic():
    sc = Scenario(num_sites=1, ues_per_cell=5, seed=11)
    a = Topology(sc)
    b = Topology(sc)
    assert np.array_equal(a.ue_positions, b.ue_positions)
    assert np.array_equal(a.rsrp, b.rsrp)
    c = Topology(Scenario(num_sites=1, ues_per_cell=5, seed=12))
    assert not np.array_equal(a.ue_positions, c.ue_positions)


def test_topology_invariants():
    topo = Topology(Scenario(ues_per_cell=3))
    sc = topo.scenario
    assert topo.num_cells == 21
    assert topo.num_ues == 63
    assert np.array_equal(
        topo.rsrp,
        sc.bs_power - topo.pathloss - topo.shadowing + topo.antenna_gain,
    )
    for u in range(topo.num_ues):
        row = topo.rsrp[u]
        serving = topo.serving_cell(u)
        assert serving == np.flatnonzero(row == row.max())[0]
        neighbors = topo.neighbors[u]
        assert len(neighbors) == 9
        assert serving not in neighbors
        assert list(row[neighbors]) == sorted(row[neighbors], reverse=True)
        assert topo.tracked_cells[u, 0] == serving
        budget = topo.link_budget(u, serving)
        assert budget.is_serving
        assert budget.rsrp == topo.serving_rsrp(u)
    served = sorted(u for members in topo.cell_members for u in members)
    assert served == list(range(topo.num_ues))


def test_edge_mask_and_gain():
    topo = Topology(Scenario(ues_per_cell=3))
    serving = topo.rsrp[np.arange(topo.num_ues), topo.serving]
    assert np.array_equal(topo.edge_mask, serving < -100.0)
    gain_db = 10.0 * np.log10(topo.tracked_gain[:, 0])
    assert np.allclose(gain_db + 43.0, serving)


def test_small_cell_count_limits_neighbors():
    topo = Topology(Scenario(num_sites=1, ues_per_cell=2))
    assert topo.neighbors.shape == (6, 2)
    assert topo.tracked_cells.shape == (6, 3)
