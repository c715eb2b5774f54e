import json

import numpy as np
import pytest

from pabtrack.topology import (Topology, TopologyError, generate_random_topology, load_topology, save_topology,
                               topology_from_dict)

DATA = __import__("pathlib").Path(__file__).parent / "data"


def _write(tmp_path, data):
    path = tmp_path / "topo.json"
    path.write_text(json.dumps(data))
    return path


def test_minimal_file(tmp_path):
    path = _write(tmp_path, {
        "nodes": ["a", "b"],
        "links": [{"id": "l0", "from": "a", "to": "r"}, {"id": "l1", "from": "r", "to": "b"}],
        "paths": [{"id": "p0", "src": "a", "dst": "b", "links": ["l0", "l1"]}],
    })
    topo = load_topology(path)
    lp, pl = topo.incidence()
    assert topo.n_links == 2 and topo.n_paths == 1
    assert lp[0] == (0, 1)
    assert pl[0] == (0,)


def test_ids_follow_file_order(tmp_path):
    path = _write(tmp_path, {
        "links": [{"id": "z"}, {"id": "a"}],
        "paths": [{"id": "p", "links": ["a", "z"]}],
    })
    assert load_topology(path).path_links == ((1, 0),)


def test_dangling_link_rejected(tmp_path):
    path = _write(tmp_path, {"links": [{"id": "l0"}], "paths": [{"id": "p", "links": ["l0", "nope"]}]})
    with pytest.raises(TopologyError, match="unknown link"):
        load_topology(path)


def test_empty_path_rejected():
    with pytest.raises(TopologyError, match="empty"):
        topology_from_dict({"links": [{"id": "l0"}], "paths": [{"id": "p", "links": []}]})


def test_unused_link_rejected():
    with pytest.raises(TopologyError, match="not on any path"):
        Topology(n_links=2, path_links=((0,),))


def test_unparseable_file(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(TopologyError):
        load_topology(path)


def test_nine_node_fixture_has_72_paths():
    topo = load_topology(DATA / "topology_9nodes.json")
    assert topo.n_paths == 72


def test_shared_link_incidence(fig3_topology):
    _, pl = fig3_topology.incidence()
    assert pl[1] == (0, 1)
    assert pl[0] == (0,) and pl[2] == (1,)


def test_incidence_matches_rescan():
    topo = load_topology(DATA / "topology_9nodes.json")
    raw = json.loads((DATA / "topology_9nodes.json").read_text())
    names = {link["id"]: i for i, link in enumerate(raw["links"])}
    rescan = {}
    for p, path in enumerate(raw["paths"]):
        for name in path["links"]:
            rescan.setdefault(names[name], set()).add(p)
    lp, pl = topo.incidence()
    assert {l: set(ps) for l, ps in pl.items()} == rescan
    for p, links in lp.items():
        for l in links:
            assert p in pl[l]
    mat = topo.incidence_matrix()
    for l, ps in pl.items():
        assert set(np.flatnonzero(mat[:, l])) == set(ps)


@pytest.mark.parametrize("n", [2, 3, 9])
def test_generated_path_count(n):
    topo = generate_random_topology(n, seed=1)
    assert topo.n_paths == n * (n - 1)
    assert all(len(ls) >= 1 for ls in topo.path_links)


def test_generator_is_deterministic():
    a = generate_random_topology(9, seed=4)
    b = generate_random_topology(9, seed=4)
    assert a == b
    assert a != generate_random_topology(9, seed=5)


def test_generated_paths_share_links():
    topo = generate_random_topology(9, seed=0)
    assert max(len(ps) for ps in topo.link_paths) > 1
    assert 80 <= topo.n_links <= 160


def test_generator_rejects_single_node():
    with pytest.raises(ValueError):
        generate_random_topology(1)


def test_save_load_roundtrip(tmp_path):
    topo = generate_random_topology(4, seed=2)
    save_topology(topo, tmp_path / "t.json")
    again = load_topology(tmp_path / "t.json")
    assert again.path_links == topo.path_links
    assert again.path_endpoints == topo.path_endpoints
