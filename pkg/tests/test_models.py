import numpy as np
import pytest

from lucmodel.features import assemble_dataset, build_feature_stack, left_columns_region, region_split
from lucmodel.models import (CdaeModel, build_cdae, build_conv_net, build_geo_net, build_model,
                             corrupt, encode_latent, export_activations, jitter,
                             load_trained_model, save_trained_model, train_cdae,
                             train_classifier)
from lucmodel.metrics import auc_roc
from lucmodel.nn.optim import TrainConfig
from lucmodel.raster import load_field
from lucmodel.synth import SynthConfig, make_scenario


@pytest.fixture(scope="module")
def data():
    sc = make_scenario(SynthConfig(width=48, height=48, rng_seed=1))
    stack = build_feature_stack(sc.grid_t0, sc.aux)
    ds = assemble_dataset(sc.grid_t0, sc.grid_t1, stack, sc.image, (1, 3), 27)
    tr, va = region_split(ds, left_columns_region(sc.grid_t0.shape, 0.25))
    return stack, tr, va


def test_conv_trunk_shapes():
    spec = build_conv_net("agriculture_to_built_up", 11, width_scale=1 / 64)
    shapes = spec.trunk().shapes()
    spatial = [s[1] for s in shapes if len(s) == 3]
    assert spatial[0] == 27 and 9 in spatial and spatial[-1] == 3
    assert shapes[-1] == (spec.trunk_filters[-1],)


def test_conv_widths_scale():
    full = build_conv_net("forest_to_agriculture", 5)
    assert full.trunk_filters == (128, 256, 512, 1024)
    assert full.classifier_widths[0] == 1036
    with pytest.raises(ValueError):
        build_conv_net("water_to_forest", 5)


def test_cdae_shapes():
    spec = build_cdae(7, 11, "agriculture_to_built_up", width_scale=1 / 16)
    enc = spec.encoder().shapes()
    assert [s[1] for s in enc if len(s) == 3][-1] == 9
    assert spec.autoencoder().output_shape == (7, 81, 81)
    assert build_cdae(7, 11, "agriculture_to_built_up").classifier_widths == (579, 579, 579, 100)
    assert spec.latent_length == spec.encoder_filters[-1] * 81


def test_corrupt_and_jitter(rng):
    x = np.zeros((2, 3, 5, 5))
    noisy = corrupt(x, 0.3, np.random.default_rng(0))
    assert noisy.std() == pytest.approx(0.3, rel=0.2)
    assert np.array_equal(corrupt(x, 0.0, rng), x)
    ones = np.ones((4, 3, 5, 5))
    j = jitter(ones, np.random.default_rng(0), 0.1)
    assert np.all(j[:, :, 0, 0][:, :, None, None] == j)  # constant factor per band
    assert np.all((j >= 0.5) & (j <= 1.5))


def test_geo_net_learns(data):
    stack, tr, va = data
    cfg = TrainConfig(learning_rate=0.05, batch_size=32, max_steps=150, eval_every=50)
    trained = train_classifier(build_model(build_geo_net(stack.n_features)), tr, va, cfg)
    # the map is too small to generalise; check that optimisation fits the ranking
    assert auc_roc(trained.predict_dataset(tr), tr.labels) > 0.85


def test_training_is_deterministic(data):
    stack, tr, va = data
    spec = build_conv_net("agriculture_to_built_up", stack.n_features, width_scale=1 / 64)
    cfg = TrainConfig(batch_size=8, max_steps=6, eval_every=3)
    a = train_classifier(build_model(spec, 4), tr, va, cfg, max_validation=64)
    b = train_classifier(build_model(spec, 4), tr, va, cfg, max_validation=64)
    for k, v in a.model.state().items():
        assert np.array_equal(v, b.model.state()[k])


def test_model_save_load_predicts_identically(tmp_path, data):
    stack, tr, va = data
    spec = build_conv_net("agriculture_to_built_up", stack.n_features, width_scale=1 / 64)
    cfg = TrainConfig(batch_size=8, max_steps=4, eval_every=2)
    trained = train_classifier(build_model(spec), tr, va, cfg, max_validation=64)
    save_trained_model(trained, tmp_path / "m")
    back = load_trained_model(tmp_path / "m")
    idx = np.arange(20)
    assert np.array_equal(back.predict_dataset(va, idx), trained.predict_dataset(va, idx))


def test_export_activations(tmp_path, data):
    stack, tr, va = data
    spec = build_conv_net("agriculture_to_built_up", stack.n_features, width_scale=1 / 64)
    model = build_model(spec)
    act = export_activations(model, va.patch_batch([0])[0], None, tmp_path / "a.lucf")
    assert act.shape == (spec.trunk_filters[0], 27, 27)
    assert np.all(act >= 0)
    np.testing.assert_array_equal(load_field(tmp_path / "a.lucf"), act)


def test_cdae_training_reduces_error(data):
    _, tr, va = data
    spec = build_cdae(7, 11, "agriculture_to_built_up", width_scale=1 / 16, patch_size=27)
    hold = va.patch_batch(np.arange(16), 27)
    cfg = TrainConfig(learning_rate=0.02, batch_size=8, max_steps=40, eval_every=20)
    init = CdaeModel(spec, np.random.default_rng([0, 0])).mse(hold)
    ae = train_cdae(spec, tr, cfg, validation_images=hold)
    assert ae.model.mse(hold) < init
    z = encode_latent(ae, hold[0])
    assert z.size == spec.latent_length


def test_cdae_net_classifier_runs(data):
    stack, tr, va = data
    spec = build_cdae(7, stack.n_features, "agriculture_to_built_up", width_scale=1 / 16,
                      patch_size=27)
    ae = train_cdae(spec, tr, TrainConfig(batch_size=8, max_steps=2, eval_every=2))
    model = build_model(spec, 0, ae.model)
    trained = train_classifier(model, tr, va, TrainConfig(batch_size=8, max_steps=3, eval_every=3),
                               max_validation=32)
    p = trained.predict_dataset(va, np.arange(10))
    assert p.shape == (10,) and np.all((p > 0) & (p < 1))
