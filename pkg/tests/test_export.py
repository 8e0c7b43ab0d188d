import numpy as np
import pytest

from aaformer.attention import LayerTrace
from aaformer.model import AAformer, ModelConfig
from aaformer.sinkhorn import AssignmentMask, entropic_transport
from aaformer.export import export_maps, part_maps, read_pgm, read_plan_csv, write_pgm


def toy_trace(weights, part_of, sets=(1,)):
    """Single head, hand-built trace over len(part_of[0]) patches."""
    N = weights.shape[-1]
    masks = [AssignmentMask(np.asarray(po)[None], g) for po, g in zip(part_of, sets)]
    sims = [np.zeros((1, g, N)) for g in sets]
    return LayerTrace(tuple(sets), sims, [None] * len(sets), masks, weights[None])


def test_singleton_map():
    w = np.zeros((2, 6))
    w[0, :5] = 0.2
    w[1, 5] = 1.0
    trace = toy_trace(w, [[0, 0, 0, 0, 0, 1]], sets=(2,))
    maps = part_maps(trace, 0, (3, 2))
    assert maps.shape == (2, 3, 2)
    assert np.count_nonzero(maps[1]) == 1 and maps[1].max() == 255 and maps[1][2, 1] == 255


def test_uniform_four_patches():
    w = np.zeros((1, 6))
    w[0, [0, 2, 3, 5]] = 0.25
    trace = toy_trace(w, [[0] * 6])
    m = part_maps(trace, 0, (2, 3))
    assert sorted(m.ravel().tolist()) == [0, 0, 255, 255, 255, 255]


def test_outside_subset_black():
    w = np.full((2, 4), 0.25)
    w[0] = [0.5, 0.5, 0.0, 0.0]
    w[1] = [0.0, 0.0, 0.9, 0.1]
    trace = toy_trace(w, [[0, 0, 1, 1]], sets=(2,))
    m = part_maps(trace, 0, (2, 2))
    assert m[0].tolist() == [[255, 255], [0, 0]]
    assert m[1].tolist() == [[0, 0], [255, 28]]


def test_pgm_roundtrip(tmp_path):
    px = np.arange(12, dtype=np.uint8).reshape(3, 4) * 20
    path = write_pgm(tmp_path / "a.pgm", px, scale=2)
    assert path.read_bytes().startswith(b"P5\n8 6\n255\n")
    back = read_pgm(path)
    np.testing.assert_array_equal(back[::2, ::2], px)


def test_export_from_model(tmp_path, rng):
    cfg = ModelConfig(image_h=16, image_w=8, patch_size=4, stride=4, embed_dim=16, heads=2, layers=2,
                      granularity_sets=(2, 3))
    out = AAformer(cfg, seed=0).forward(rng.random((16, 8, 3)))
    paths = export_maps(out.traces, 1, 1, tmp_path, cfg.grid, scale=3)
    names = sorted(p.name for p in paths)
    assert names == sorted([f"part_L1_H1_P{p}.pgm" for p in range(5)] + ["part_L1_H1.csv"])
    assert read_pgm(tmp_path / "part_L1_H1_P0.pgm").shape == (12, 6)

    table = read_plan_csv(tmp_path / "part_L1_H1.csv")
    trace = out.traces[1]
    plan = np.concatenate([trace.plans[0].values[1], trace.plans[1].values[1]])
    assert table["plan"].tobytes() == plan.tobytes()
    sim = np.concatenate([trace.similarities[0][1], trace.similarities[1][1]])
    assert table["similarity"].tobytes() == sim.tobytes()
    np.testing.assert_array_equal(table["assigned"], trace.membership()[1])
    assert table["set"].tolist() == [0, 0, 1, 1, 1]


def test_export_batched_trace_needs_image(tmp_path, rng):
    cfg = ModelConfig(image_h=16, image_w=8, patch_size=4, stride=4, embed_dim=16, heads=2, layers=1,
                      granularity_sets=(2,))
    out = AAformer(cfg, seed=0).forward(rng.random((3, 16, 8, 3)))
    with pytest.raises(ValueError):
        part_maps(out.traces[0], 0, cfg.grid)
    assert part_maps(out.traces[0], 0, cfg.grid, image=2).shape == (2, 4, 2)


@pytest.mark.parametrize("layer,head", [(5, 0), (-1, 0), (0, 7)])
def test_out_of_range(tmp_path, rng, layer, head):
    cfg = ModelConfig(image_h=16, image_w=8, patch_size=4, stride=4, embed_dim=16, heads=2, layers=1,
                      granularity_sets=(2,))
    out = AAformer(cfg, seed=0).forward(rng.random((16, 8, 3)))
    with pytest.raises(IndexError):
        export_maps(out.traces, layer, head, tmp_path, cfg.grid)


def test_plan_sidecar_repr_exact(tmp_path, rng):
    sim = rng.standard_normal((1, 2, 4))
    plan = entropic_transport(sim, 0.05, 3)
    mask = AssignmentMask(np.array([[0, 1, 0, 1]]), 2)
    trace = LayerTrace((2,), [sim], [plan], [mask], np.full((1, 2, 4), 0.5))
    export_maps([trace], 0, 0, tmp_path, (2, 2))
    assert read_plan_csv(tmp_path / "part_L0_H0.csv")["plan"].tobytes() == plan.values[0].tobytes()
