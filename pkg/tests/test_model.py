import numpy as np
import pytest

from gascn import autodiff as ad
from gascn.autodiff import ShapeError, Tape, Tensor, grad_check
from gascn.graph import build_knn_graph
from gascn.model import (CheckpointError, ModelConfig, ModelParams, decode_coarse, decode_normals, decode_sigma,
                         densify, encode, forward, gat_layer, init_params, load_config, load_params, param_shapes,
                         refine, save_params)
from gascn.training import combined_loss

from conftest import check_param_grads, random_cloud, small_config


def randomized(params: ModelParams, rng, scale=0.5) -> ModelParams:
    """Every entry nonzero so no gradient path is trivially dead."""
    out = params.copy()
    for name, t in out.items():
        t.data[...] = rng.uniform(-scale, scale, size=t.shape) / np.sqrt(t.shape[0])
    return out


# ---------------------------------------------------------------- parameters


def test_param_shapes_and_init_determinism():
    cfg = small_config()
    a, b = init_params(cfg, 7), init_params(cfg, 7)
    assert list(a) == list(param_shapes(cfg))
    for name, shape in param_shapes(cfg).items():
        assert a[name].shape == shape
        assert np.array_equal(a[name].data, b[name].data)
    assert param_shapes(cfg)["normal_mlp.phi2.1.W"][1] == 3
    assert param_shapes(cfg)["sigma_mlp.2.W"][1] == 1
    assert not init_params(cfg, 8)["gat.0.W"].data.tolist() == a["gat.0.W"].data.tolist()


def test_variants_drop_their_branches():
    assert not any(n.startswith("gat.") for n in param_shapes(small_config(variant="model_b")))
    assert not any(n.startswith(("normal_mlp", "sigma_mlp")) for n in param_shapes(small_config(variant="model_a")))
    assert "gat.1.W" in param_shapes(small_config(num_gat_layers=2))


def test_config_validation_and_round_trip():
    with pytest.raises(ValueError):
        ModelConfig(variant="model_c")
    with pytest.raises(ValueError):
        ModelConfig(num_gat_layers=0)
    cfg = small_config(variant="model_a")
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        ModelConfig.from_dict({**cfg.to_dict(), "bogus": 1})
    assert ModelConfig().n_fine == 2304
    assert ModelConfig.full_size().n_coarse == 1024 and ModelConfig.full_size().n_fine == 16384


# ----------------------------------------------------------------------- GAT


def gat_params(w, a):
    return ModelParams({"gat.0.W": Tensor(w), "gat.0.a": Tensor(a)})


def test_gat_single_node_collapses_to_activation():
    h = Tensor([[0.3, -0.7]])
    g = build_knn_graph(np.zeros((1, 3)), 0)
    out = gat_layer(h, g, gat_params(np.eye(2), np.zeros((4, 1))))
    assert np.allclose(out.data, ad.leaky_relu(h).data, atol=1e-15)


def test_gat_zero_attention_vector_averages_neighbours(rng):
    pts = rng.normal(size=(12, 3))
    g = build_knn_graph(pts, 4)
    w = rng.normal(size=(3, 5))
    out = gat_layer(Tensor(pts), g, gat_params(w, np.zeros((10, 1))))
    z = pts @ w
    mean = z[g.src].reshape(12, 5, 5).mean(axis=1)
    assert np.allclose(out.data, ad.leaky_relu(Tensor(mean)).data, atol=1e-13)


def test_gat_gradients(rng):
    pts = rng.normal(size=(10, 3))
    g = build_knn_graph(pts, 3)
    params = gat_params(rng.normal(size=(3, 4)), rng.normal(size=(8, 1)))
    proj = Tensor(rng.normal(size=(10, 4)))
    loss = lambda p: ad.sum_all(ad.mul(gat_layer(Tensor(pts), g, p), proj))  # noqa: E731
    reports = check_param_grads(params, loss, tol=1e-4)
    assert all(r.passed for r in reports.values()), reports
    x = Tensor(pts.copy())
    assert grad_check(lambda t: ad.sum_all(ad.mul(gat_layer(t, g, params), proj)), x, tol=1e-4).passed


# ------------------------------------------------------------------- encoder


def test_encode_latent_size_for_any_m(tiny_model, rng):
    cfg, params = tiny_model
    for m in (cfg.input_k + 1, 17, 40):
        assert encode(random_cloud(rng, m), params, cfg).shape == (cfg.latent_dim,)
    with pytest.raises(ValueError):
        encode(random_cloud(rng, cfg.input_k), params, cfg)


@pytest.mark.parametrize("variant", ["full", "model_b"])
def test_encode_permutation_invariant(rng, variant):
    cfg = small_config(variant=variant)
    params = randomized(init_params(cfg, 0), rng)
    pts = random_cloud(rng, 30)
    perm = rng.permutation(30)
    assert np.abs(encode(pts, params, cfg).data - encode(pts[perm], params, cfg).data).max() < 1e-9


def test_encode_duplicate_points_pointwise_branch(rng):
    cfg = small_config(variant="model_b")
    params = randomized(init_params(cfg, 0), rng)
    pts = random_cloud(rng, 25)
    doubled = np.vstack([pts, pts])
    assert np.abs(encode(pts, params, cfg).data - encode(doubled, params, cfg).data).max() < 1e-9


def test_encode_multi_layer_gat(rng):
    cfg = small_config(num_gat_layers=2)
    params = randomized(init_params(cfg, 0), rng)
    assert np.all(np.isfinite(encode(random_cloud(rng, 20), params, cfg).data))


# ------------------------------------------------------------------- decoder


def test_decode_coarse_zero_weights_gives_origin():
    cfg = small_config()
    params = init_params(cfg, 0)
    for name in params:
        if name.startswith("coarse_fc"):
            params[name].data[...] = 0.0
    out = decode_coarse(Tensor(np.ones(cfg.latent_dim)), params, cfg)
    assert out.shape == (cfg.n_coarse, 3) and not out.data.any()


def test_full_size_preset_counts(rng):
    cfg = ModelConfig.full_size(latent_dim=32, final_hidden=32, coarse_hidden=(32, 32), gat_dim=8, cart_dim=8)
    params = init_params(cfg, 0)
    out = forward(random_cloud(rng, 40), params, cfg)
    assert out.coarse.shape == (1024, 3) and out.fine.shape == (16384, 3)


def test_normals_unit_and_sigma_positive(tiny_model, rng):
    cfg, params = tiny_model
    params = randomized(params, rng, scale=3.0)
    g = encode(random_cloud(rng, 20), params, cfg)
    coarse = decode_coarse(g, params, cfg)
    nd = decode_normals(coarse, g, params, cfg)
    assert nd.normals.shape == (cfg.n_coarse, 3)
    assert np.abs(np.linalg.norm(nd.normals.data, axis=1) - 1).max() < 1e-9
    sigma = decode_sigma(nd.n_imd, nd.c_local, nd.c_map, nd.g_map, params, cfg)
    assert np.all(sigma.data > 0)


def test_sigma_is_one_with_zero_final_layer(tiny_model, rng):
    cfg, params = tiny_model
    params = randomized(params, rng)
    params["sigma_mlp.2.W"].data[...] = 0.0
    params["sigma_mlp.2.b"].data[...] = 0.0
    out = forward(random_cloud(rng, 20), params, cfg)
    assert np.array_equal(out.sigma.data, np.ones(cfg.n_coarse))


def _patch_inputs(rng, n=5):
    coarse = Tensor(rng.normal(size=(n, 3)))
    normals = rng.normal(size=(n, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return coarse, Tensor(normals), Tensor(rng.uniform(0.5, 2.0, size=n))


def test_densify_identity_and_collapse():
    cfg = small_config(grid_n=3)
    grid = densify(Tensor(np.zeros((1, 3))), Tensor([[0.0, 0.0, 1.0]]), Tensor([1.0]), cfg).data
    from gascn.geometry import meshgrid_square
    assert np.allclose(grid, meshgrid_square(3, cfg.grid_l), atol=1e-15)
    p = np.array([[0.2, -0.1, 0.4]])
    collapsed = densify(Tensor(p), Tensor([[0.6, 0.0, 0.8]]), Tensor([0.0]), cfg).data
    assert np.allclose(collapsed, np.repeat(p, 9, axis=0), atol=1e-15)


def test_densify_matches_rotation_from_normal(rng):
    from gascn.geometry import meshgrid_square, rotation_from_normal
    cfg = small_config(grid_n=3)
    coarse, normals, sigma = _patch_inputs(rng)
    normals.data[0] = [0.0, 0.0, -1.0]
    dense = densify(coarse, normals, sigma, cfg).data.reshape(5, 9, 3)
    grid = meshgrid_square(3, cfg.grid_l)
    for i in range(5):
        r = rotation_from_normal(normals.data[i]).rotation
        expect = (sigma.data[i] * grid) @ r.T + coarse.data[i]
        assert np.allclose(dense[i], expect, atol=1e-14)


def test_densify_patch_geometry(rng):
    cfg = small_config(grid_n=4)
    coarse, normals, sigma = _patch_inputs(rng, 8)
    dense = densify(coarse, normals, sigma, cfg).data.reshape(8, 16, 3)
    assert np.abs(dense.mean(axis=1) - coarse.data).max() < 1e-9
    for i in range(8):
        centred = dense[i] - dense[i].mean(axis=0)
        plane_normal = np.linalg.svd(centred)[2][-1]
        assert min(np.abs(plane_normal - normals.data[i]).max(), np.abs(plane_normal + normals.data[i]).max()) < 1e-6


def test_densify_gradients(rng):
    cfg = small_config(grid_n=3)
    coarse, normals, sigma = _patch_inputs(rng)
    proj = Tensor(rng.normal(size=(45, 3)))
    raw = Tensor(normals.data * rng.uniform(0.5, 2.0, size=(5, 1)))
    f = lambda c, r, s: ad.sum_all(ad.mul(densify(c, ad.l2_normalize_rows(r), s, cfg), proj))  # noqa: E731
    assert grad_check(lambda t: f(t, raw, sigma), Tensor(coarse.data.copy()), tol=1e-6).passed
    assert grad_check(lambda t: f(coarse, t, sigma), Tensor(raw.data.copy()), tol=1e-6).passed
    assert grad_check(lambda t: f(coarse, raw, t), Tensor(sigma.data.copy()), tol=1e-6).passed


def test_densify_rejects_non_unit_normals(rng):
    coarse, normals, sigma = _patch_inputs(rng)
    with pytest.raises(ValueError):
        densify(coarse, Tensor(normals.data * 2), sigma, small_config())


def test_refine_with_zero_weights_is_identity(tiny_model, rng):
    cfg, params = tiny_model
    params = randomized(params, rng)
    for name in params:
        if name.startswith("refine_mlp"):
            params[name].data[...] = 0.0
    out = forward(random_cloud(rng, 20), params, cfg)
    assert np.array_equal(out.fine.data, out.dense.data)
    assert refine(out.dense, out.coarse, cfg, params).shape == (cfg.n_fine, 3)


# ------------------------------------------------------------------- forward


@pytest.mark.parametrize("variant", ["full", "model_a", "model_b"])
def test_forward_invariants(rng, variant):
    cfg = small_config(variant=variant)
    params = randomized(init_params(cfg, 0), rng)
    pts = random_cloud(rng, 30)
    out = forward(pts, params, cfg)
    assert out.coarse.shape == (cfg.n_coarse, 3)
    assert out.dense.shape == out.fine.shape == (cfg.n_fine, 3)
    assert all(np.all(np.isfinite(t.data)) for t in (out.latent, out.coarse, out.dense, out.fine))
    if variant != "model_a":
        assert np.abs(np.linalg.norm(out.normals.data, axis=1) - 1).max() < 1e-9
        assert np.all(out.sigma.data > 0)
    perm = rng.permutation(30)
    again = forward(pts[perm], params, cfg)
    for name in ("latent", "coarse", "normals", "sigma", "dense", "fine"):
        a, b = getattr(out, name), getattr(again, name)
        if a is not None:
            assert np.abs(a.data - b.data).max() < 1e-9, name


def test_forward_end_to_end_gradients(rng):
    cfg = small_config()
    params = randomized(init_params(cfg, 11), rng)
    pts = random_cloud(rng, 30)
    gt = random_cloud(rng, 64)
    graph = build_knn_graph(pts, cfg.input_k)

    def loss(p):
        out = forward(pts, p, cfg, graph)
        return combined_loss(out.coarse, out.fine, gt, 0.7).loss

    reports = check_param_grads(params, loss, tol=1e-4)
    bad = {k: str(r) for k, r in reports.items() if not r.passed}
    assert not bad


# ---------------------------------------------------------------- checkpoint


def test_checkpoint_round_trip_bit_exact(tmp_path, tiny_model, rng):
    cfg, params = tiny_model
    params = randomized(params, rng)
    path = tmp_path / "model.gasc"
    save_params(params, path, cfg)
    loaded = load_params(path, cfg)
    assert list(loaded) == list(params)
    for name in params:
        assert np.array_equal(loaded[name].data, params[name].data)
    again = tmp_path / "again.gasc"
    save_params(loaded, again, cfg)
    assert path.read_bytes() == again.read_bytes()
    assert load_config(path) == cfg


def test_checkpoint_layout(tmp_path):
    params = ModelParams({"w": Tensor(np.array([[1.5, -2.0]]))})
    path = tmp_path / "c.gasc"
    save_params(params, path)
    raw = path.read_bytes()
    expected = (b"GASC" + (1).to_bytes(2, "little") + (1).to_bytes(4, "little") + (1).to_bytes(2, "little")
                + b"w" + bytes([2]) + (1).to_bytes(8, "little") + (2).to_bytes(8, "little")
                + np.array([1.5, -2.0], dtype="<f8").tobytes())
    assert raw == expected


def test_checkpoint_errors(tmp_path, tiny_model):
    cfg, params = tiny_model
    path = tmp_path / "m.gasc"
    save_params(params, path, cfg)
    raw = path.read_bytes()
    (tmp_path / "magic.gasc").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError, match="magic"):
        load_params(tmp_path / "magic.gasc")
    (tmp_path / "ver.gasc").write_bytes(raw[:4] + (9).to_bytes(2, "little") + raw[6:])
    with pytest.raises(CheckpointError, match="version"):
        load_params(tmp_path / "ver.gasc")
    (tmp_path / "short.gasc").write_bytes(raw[:-5])
    with pytest.raises(CheckpointError, match="truncated"):
        load_params(tmp_path / "short.gasc")
    with pytest.raises(ShapeError, match="gat.0.W"):
        load_params(path, small_config(gat_dim=7))
