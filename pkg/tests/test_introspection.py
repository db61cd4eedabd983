import numpy as np
import pytest

from pdit.introspection import (
    AttentionDump,
    IntrospectionError,
    SaliencyMap,
    attention_dump,
    export_dump,
    export_heatmap,
    input_gradient_saliency,
    read_pgm,
    read_sidecar,
)
from pdit.network import VARIANTS, PDiTConfig, TrajectoryContext, forward, init_params

GRID = dict(modality="image", obs_shape=(12, 12, 1), action_type="discrete", action_dim=4)
POINT = dict(modality="proprio", obs_shape=(4,), action_type="continuous", action_dim=2)
HYBRID = dict(modality="hybrid", obs_shape=(12, 12, 3), action_type="discrete", action_dim=4,
              vocab_size=10, n_words=3)


def setup(base=GRID, seed=0, **kw):
    kw.setdefault("embed_dim", 16)
    kw.setdefault("context", 2)
    kw.setdefault("patch_size", 4)
    cfg = PDiTConfig(**base, **kw)
    return cfg, init_params(cfg, seed)


def ctx_for(cfg, rng, b=1, obs=None):
    w = cfg.window
    obs = rng.normal(size=(b, w, *cfg.obs_shape)) if obs is None else obs
    actions = rng.integers(cfg.action_dim, size=(b, cfg.context)) if cfg.discrete else rng.normal(size=(b, cfg.context, cfg.action_dim))
    words = rng.integers(1, cfg.vocab_size, size=(b, w, cfg.n_words)) if cfg.modality == "hybrid" else None
    valid = np.ones((b, w), dtype=bool)
    return TrajectoryContext(rng.normal(size=(b, w)), obs, actions, valid, words)


# ------------------------------------------------------------------ attention
@pytest.mark.parametrize("variant", VARIANTS)
def test_dump_rows_are_distributions(rng, variant):
    cfg, params = setup(variant=variant, n_layers=2)
    dump = attention_dump(params, cfg, ctx_for(cfg, rng, b=2), batch_index=1)
    dump.validate()
    for a in dump.perceiving:
        assert a.shape == (2, 1 + cfg.n_patches(), 1 + cfg.n_patches())
    for a in dump.deciding:
        assert a.shape == (2, cfg.seq_len, cfg.seq_len)
        assert np.all(a[..., np.triu(np.ones((cfg.seq_len,) * 2, dtype=bool), 1)] == 0.0)
        assert np.all(np.diagonal(a, axis1=-2, axis2=-1) > 0)


def test_dump_has_one_entry_per_layer(rng):
    cfg, params = setup(n_layers=3)
    dump = attention_dump(params, cfg, ctx_for(cfg, rng))
    assert len(dump.perceiving) == len(dump.deciding) == 3
    rows = dump.integration_rows()
    assert rows[0].shape == (2, 1 + 9)
    np.testing.assert_array_equal(rows[1], dump.perceiving[1][:, 0])


def test_single_patch_observation_attends_to_itself(rng):
    cfg, params = setup(patch_size=12)
    dump = attention_dump(params, cfg, ctx_for(cfg, rng))
    assert dump.perceiving[0].shape == (2, 2, 2)
    dump.validate()


def test_validate_catches_bad_dumps():
    eye = np.eye(5)[None]
    AttentionDump(perceiving=[eye], deciding=[eye]).validate()
    with pytest.raises(IntrospectionError, match="rows"):
        AttentionDump(perceiving=[eye * 0.5]).validate()
    upper = np.full((1, 3, 3), 1 / 3)
    with pytest.raises(IntrospectionError, match="diagonal"):
        AttentionDump(deciding=[upper]).validate()
    with pytest.raises(IntrospectionError, match="negative"):
        AttentionDump(perceiving=[np.array([[[1.5, -0.5]]])]).validate()


# ------------------------------------------------------------------- saliency
@pytest.mark.parametrize("base", [GRID, HYBRID, POINT])
def test_saliency_matches_patch_grid(rng, base):
    cfg, params = setup(base)
    sal = input_gradient_saliency(params, cfg, ctx_for(cfg, rng))
    expected = (3, 3) if base is not POINT else (4,)
    assert sal.values.shape == expected
    assert np.all(sal.values >= 0) and sal.values.max() == pytest.approx(1.0)
    assert sal.scale == pytest.approx(sal.raw.max())
    if base is HYBRID:
        assert sal.words.shape == (3,)
    else:
        assert sal.words is None


def test_constant_observation_gives_uniform_saliency(f64, rng):
    cfg, params = setup(n_layers=2)
    params["tok.pos"].data[:] = 0.0
    obs = np.full((1, cfg.window, *cfg.obs_shape), 0.3)
    sal = input_gradient_saliency(params, cfg, ctx_for(cfg, rng, obs=obs))
    assert sal.scale > 0
    np.testing.assert_allclose(sal.values, 1.0, atol=1e-5)


def test_no_decider_ignores_returns(rng):
    cfg, params = setup(variant="no-decider")
    sal = input_gradient_saliency(params, cfg, ctx_for(cfg, rng))
    assert sal.returns.shape == (cfg.window,)
    assert np.all(sal.returns == 0.0)
    full_cfg, full = setup()
    assert np.any(input_gradient_saliency(full, full_cfg, ctx_for(full_cfg, rng)).returns > 0)


def test_no_perceiver_saliency_is_per_pixel(rng):
    cfg, params = setup(variant="no-perceiver")
    sal = input_gradient_saliency(params, cfg, ctx_for(cfg, rng))
    assert sal.values.shape == (12, 12)


def test_saliency_ignores_logit_shift(f64, rng):
    cfg, params = setup()
    ctx = ctx_for(cfg, rng)
    a = input_gradient_saliency(params, cfg, ctx, target=2)
    params["head.b2"].data += 3.0
    b = input_gradient_saliency(params, cfg, ctx, target=2)
    np.testing.assert_allclose(a.raw, b.raw, rtol=1e-12)


def test_saliency_does_not_leave_gradients(rng):
    cfg, params = setup()
    input_gradient_saliency(params, cfg, ctx_for(cfg, rng))
    assert all(p.grad is None for p in params.values())


def test_invalid_target(rng):
    cfg, params = setup()
    with pytest.raises(IndexError):
        input_gradient_saliency(params, cfg, ctx_for(cfg, rng), target=4)
    with pytest.raises(IndexError):
        input_gradient_saliency(params, cfg, ctx_for(cfg, rng), target=-1)


def test_default_target_is_argmax(rng):
    cfg, params = setup()
    ctx = ctx_for(cfg, rng)
    assert input_gradient_saliency(params, cfg, ctx).target == int(np.argmax(forward(ctx, params, cfg).data[0]))


# --------------------------------------------------------------------- export
def test_zero_map_exports_zero_graymap(tmp_path):
    pgm, side = export_heatmap(np.zeros((3, 4)), tmp_path / "z.pgm")
    gray = read_pgm(pgm)
    assert gray.shape == (3, 4) and np.all(gray == 0)
    assert np.all(np.isfinite(read_sidecar(side)["values"]))


def test_graymap_dimensions_and_scaling(tmp_path):
    v = np.array([[0.0, 0.5, 1.0], [0.25, 0.75, 0.1]])
    pgm, _ = export_heatmap(v, tmp_path / "m.pgm")
    gray = read_pgm(pgm)
    assert gray.shape == (2, 3)
    assert gray[0].tolist() == [0, 128, 255]
    assert pgm.read_text().splitlines()[:3] == ["P2", "3 2", "255"]


def test_sidecar_round_trip_is_exact(tmp_path, rng):
    v = rng.random((5, 7))
    _, side = export_heatmap(v, tmp_path / "a.pgm", kind="deciding", layer=1, head=0)
    meta = read_sidecar(side)
    np.testing.assert_array_equal(meta["values"], v)
    assert (meta["kind"], meta["layer"], meta["head"], meta["rows"], meta["cols"]) == ("deciding", 1, 0, 5, 7)


def test_saliency_map_export(tmp_path):
    sal = SaliencyMap(np.array([[0.0, 1.0]]), np.array([[0.0, 2.0]]), 2.0, 1)
    pgm, side = export_heatmap(sal, tmp_path / "s.pgm")
    assert read_pgm(pgm).tolist() == [[0, 255]]
    assert sal.to_dict()["scale"] == 2.0


def test_export_rejects_bad_input(tmp_path):
    with pytest.raises(IntrospectionError):
        export_heatmap(np.zeros((2, 2, 2)), tmp_path / "x.pgm")
    with pytest.raises(IntrospectionError):
        export_heatmap(np.array([[np.nan]]), tmp_path / "x.pgm")
    with pytest.raises(OSError):
        export_heatmap(np.zeros((2, 2)), tmp_path / "missing" / "x.pgm")


def test_dump_export_names_every_head(tmp_path, rng):
    cfg, params = setup(n_layers=2)
    written = export_dump(attention_dump(params, cfg, ctx_for(cfg, rng)), tmp_path / "d")
    assert len(written) == 2 * 2 * 2
    assert sorted(p.name for p in (tmp_path / "d").glob("*.pgm")) == sorted(p.name for p in written)
    assert (tmp_path / "d" / "deciding_l1_h0.pgm").exists()
    assert read_pgm(tmp_path / "d" / "deciding_l0_h1.pgm").shape == (cfg.seq_len, cfg.seq_len)


def test_read_pgm_rejects_other_formats(tmp_path):
    p = tmp_path / "bad.pgm"
    p.write_text("P5\n1 1\n255\n0\n")
    with pytest.raises(IntrospectionError):
        read_pgm(p)
    p.write_text("P2\n2 2\n255\n0 0 0\n")
    with pytest.raises(IntrospectionError, match="expected 4"):
        read_pgm(p)
