import json

import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings, strategies as st

from fovx.core import GENERATOR_KEYS, GradientTable, Plane, ShellId, Volume4D
from fovx.errors import ConfigError, CorruptionError, UnsupportedShellError, ValidationError
from fovx.fov import compute_acquired_mask, cut_from_brain, estimate_cutoff_thickness
from fovx.model import (DiscriminatorConfig, GeneratorConfig, ModelBundle, PatchDiscriminator,
                        ResnetGenerator, TrainConfig, combined_generator_objective,
                        gan_loss, generator_adversarial_loss, impute_normalized, impute_study,
                        l1_loss, load_bundle, prepare_sample, save_bundle, train)
from fovx.model.train import CutScales, cut_array, rescale
from fovx.patches import slab_batch
from fovx.preprocess import nearest_rank_percentile, normalize_intensity

from conftest import make_study_from, make_volume
from gradcheck import analytic, gradcheck_setup, max_relative_error, numeric

TINY = GeneratorConfig.desk(base_width=4, n_res_blocks=1)


def test_generator_shapes():
    g = ResnetGenerator(TINY)
    x = torch.rand(2, 30, 20, 12)
    with torch.no_grad():
        y = g(x)
    assert y.shape == (2, 1, 20, 12)
    assert float(y.min()) >= 0 and float(y.max()) <= 1
    d = PatchDiscriminator(DiscriminatorConfig(base_width=8), 1)
    assert d(torch.rand(2, 1, 64, 64)).shape[1] == 1


def test_generator_config_validation():
    assert GeneratorConfig().in_channels == 30
    with pytest.raises(ValidationError):
        GeneratorConfig(outer_kernel=4).validate()
    with pytest.raises(ValidationError):
        GeneratorConfig(n=0).validate()


def test_same_seed_same_weights():
    a = ModelBundle.initialize(TINY, seed=3)
    b = ModelBundle.initialize(TINY, seed=3)
    x = torch.rand(1, 30, 16, 16)
    for key in GENERATOR_KEYS:
        assert torch.equal(a.generators[key](x), b.generators[key](x))


def test_gan_loss_at_half():
    assert float(gan_loss(torch.full((4,), 0.5), torch.full((4,), 0.5))) == pytest.approx(-2 * np.log(2))


def test_l1_values():
    assert float(l1_loss(torch.zeros(3), torch.tensor([0.1, -0.2, 0.3]))) == pytest.approx(0.2)
    with pytest.raises(ValidationError):
        l1_loss(torch.zeros(3), torch.zeros(4))


def test_combined_objective_arithmetic():
    assert float(combined_generator_objective(torch.tensor(0.7), torch.tensor(0.1), 100.0)) \
        == pytest.approx(10.7)
    assert float(combined_generator_objective(torch.tensor(0.7), torch.tensor(0.1), 0.0)) \
        == pytest.approx(0.7)
    with pytest.raises(ValidationError):
        combined_generator_objective(torch.tensor(0.7), torch.tensor(0.1), -1.0)


def test_saturating_and_non_saturating_forms():
    logits = torch.tensor([-2.0, 0.0, 3.0])
    p = torch.sigmoid(logits)
    assert float(generator_adversarial_loss(logits)) == pytest.approx(float(-torch.log(p).mean()))
    assert float(generator_adversarial_loss(logits, saturating=True)) \
        == pytest.approx(float(torch.log(1 - p).mean()))


def test_objective_gradients_match_finite_differences():
    g, objective = gradcheck_setup(100.0)
    err = max_relative_error(analytic(g, objective), numeric(g, objective))
    assert err < 1e-4


def test_objective_gradient_is_linear_in_lambda():
    lam = 100.0
    g, objective = gradcheck_setup(lam)
    total = analytic(g, objective)
    adv = analytic(g, lambda: objective(adv_only=True))
    l1 = analytic(g, lambda: objective(l1_only=True))
    for t, a, l in zip(total, adv, l1):
        torch.testing.assert_close(t, a + lam * l, rtol=1e-10, atol=1e-12)


def test_small_generator_step_lowers_adversarial_loss():
    g, objective = gradcheck_setup(0.0)
    before = objective().item()
    grads = analytic(g, objective)
    with torch.no_grad():
        for p, gr in zip(g.parameters(), grads):
            p -= 1e-3 * gr
    assert objective().item() < before


class _Const(nn.Module):
    def __init__(self, value):
        super().__init__()
        self.value = value

    def forward(self, x):
        return torch.full((x.shape[0], 1, *x.shape[2:]), self.value)


SENTINELS = {(ShellId.B0, Plane.SAGITTAL): 0.1, (ShellId.B0, Plane.CORONAL): 0.2,
             (ShellId.B1300, Plane.SAGITTAL): 0.4, (ShellId.B1300, Plane.CORONAL): 0.8}


@settings(max_examples=15)
@given(st.lists(st.sampled_from([0.0, 5.0, 1250.0, 1300.0, 1390.0]), min_size=1, max_size=5))
def test_dispatch_routes_by_shell_and_plane(bvals):
    bundle = ModelBundle({k: _Const(v) for k, v in SENTINELS.items()}, GeneratorConfig.desk(n=1),
                         (6, 6, 6))
    bvecs = [[0, 0, 0] if b <= 50 else [1, 0, 0] for b in bvals]
    study = make_study_from(np.zeros((6, 6, 6, len(bvals))), GradientTable(bvals, bvecs))
    out = impute_normalized(study, make_volume(np.zeros((6, 6, 6))), bundle)
    for v, b in enumerate(bvals):
        expected = np.float32((0.1 + 0.2) * 0.5 if b <= 50 else (0.4 + 0.8) * 0.5)
        assert np.all(out[..., v] == expected)


def test_unsupported_shell_raises(phantom_study):
    bundle = ModelBundle.initialize(TINY, grid_dims=(64, 64, 64))
    table = GradientTable([0, 700], [[0, 0, 0], [1, 0, 0]])
    study = make_study_from(np.ones((4, 4, 4, 2)), table)
    with pytest.raises(UnsupportedShellError):
        impute_study(study, make_volume(np.ones((4, 4, 4))), None, bundle)


def test_bundle_roundtrip_is_bit_exact(tmp_path):
    bundle = ModelBundle.initialize(TINY, seed=5, grid_dims=(32, 32, 32), info={"note": "x"})
    save_bundle(bundle, tmp_path / "b")
    back = load_bundle(tmp_path / "b")
    x = torch.rand(2, 30, 32, 32)
    for key in GENERATOR_KEYS:
        assert torch.equal(bundle.generators[key](x), back.generators[key](x))
    assert back.grid_dims == (32, 32, 32) and back.info == {"note": "x"}
    assert back.config == bundle.config


def test_missing_blob_is_corruption(tmp_path):
    save_bundle(ModelBundle.initialize(TINY), tmp_path / "b")
    next((tmp_path / "b").glob("b1300_coronal__*.f32")).unlink()
    with pytest.raises(CorruptionError):
        load_bundle(tmp_path / "b")


def test_28_channel_blobs_under_n7_manifest_are_corrupt(tmp_path):
    save_bundle(ModelBundle.initialize(TINY), tmp_path / "b")
    path = tmp_path / "b" / "manifest.json"
    manifest = json.loads(path.read_text())
    for entry in manifest["tensors"]:
        if entry["shape"][1:2] == [30]:
            entry["shape"][1] = 28
            blob = tmp_path / "b" / entry["file"]
            arr = np.frombuffer(blob.read_bytes(), "<f4").reshape(entry["shape"][0], 30, -1)
            blob.write_bytes(arr[:, :28].tobytes())
    path.write_text(json.dumps(manifest))
    with pytest.raises(CorruptionError, match="30 input channels"):
        load_bundle(tmp_path / "b")


def test_truncated_blob_and_missing_manifest(tmp_path):
    save_bundle(ModelBundle.initialize(TINY), tmp_path / "b")
    blob = next((tmp_path / "b").glob("b0_sagittal__*weight.f32"))
    blob.write_bytes(blob.read_bytes()[:-4])
    with pytest.raises(CorruptionError):
        load_bundle(tmp_path / "b")
    with pytest.raises(CorruptionError):
        load_bundle(tmp_path / "nothing")


@pytest.fixture(scope="module")
def tiny_samples(small_phantom_study):
    s = small_phantom_study
    return [prepare_sample(s.dwi, s.t1, None, s.phantom.brain, (32, 32, 32), "a"),
            prepare_sample(s.dwi, s.t1, None, s.phantom.brain, (32, 32, 32), "b")]


def _tiny_train(samples, **kw):
    cfg = TrainConfig(max_steps=4, val_interval=2, batch_size=2,
                      discriminator=DiscriminatorConfig(base_width=4, n_layers=2), **kw)
    return train(samples[:1], samples[1:], cfg, TINY)


def test_training_is_deterministic(tiny_samples, tmp_path):
    a = _tiny_train(tiny_samples)
    b = _tiny_train(tiny_samples)
    np.testing.assert_equal(a.history, b.history)  # step-0 losses are nan
    x = torch.rand(1, 30, 32, 32)
    for key in GENERATOR_KEYS:
        assert torch.equal(a.bundle.generators[key](x), b.bundle.generators[key](x))
    assert [r["step"] for r in a.history] == [0, 2, 4]


def test_training_rejects_b0_only(tiny_samples):
    s = tiny_samples[0]
    table = GradientTable([0], [[0, 0, 0]])
    dwi = Volume4D(s.dwi.data[..., :1], s.dwi.spacing, s.dwi.affine, table)
    b0 = type(s)(dwi, s.t1, s.brain)
    with pytest.raises(ConfigError):
        _tiny_train([b0, b0])
    with pytest.raises(ConfigError):
        train([], tiny_samples, TrainConfig(), TINY)
    with pytest.raises(ConfigError):
        TrainConfig(cut_range_mm=(0, 60)).validate()


def test_training_log_has_row_per_validation(tiny_samples, tmp_path):
    cfg = TrainConfig(max_steps=4, val_interval=2, batch_size=2,
                      discriminator=DiscriminatorConfig(base_width=4, n_layers=2))
    train(tiny_samples[:1], tiny_samples[1:], cfg, TINY, log_path=tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0].startswith("step,d_loss,g_gan,g_l1,val_l1_imputed")
    assert len(lines) == 1 + 1 + 4 // 2


def test_impute_all_41_volumes(phantom_study):
    bundle = ModelBundle.initialize(TINY, grid_dims=(64, 64, 64))
    study, _, m = cut_from_brain(phantom_study.dwi, phantom_study.phantom.brain, 30.0, "top")
    out = impute_study(study, phantom_study.t1, None, bundle)
    assert out.n_volumes == 41
    assert out.gradient is study.gradient
    keep = m.data
    assert out.data[keep].tobytes() == study.data[keep].tobytes()
    assert np.all(out.data[~keep] > 0)
    norm, _ = normalize_intensity(out)
    assert estimate_cutoff_thickness(compute_acquired_mask(norm), phantom_study.phantom.brain) == 0


def test_complete_fov_is_returned_unchanged(small_phantom_study):
    bundle = ModelBundle.initialize(TINY, grid_dims=(32, 32, 32))
    s = small_phantom_study
    out = impute_study(s.dwi, s.t1, None, bundle)
    assert out.data.tobytes() == s.dwi.data.tobytes()


def test_slab_batch_feeds_generator(rng):
    dwi = rng.uniform(size=(16, 16, 16)).astype(np.float32)
    x = torch.from_numpy(slab_batch(dwi, dwi, Plane.CORONAL, [0, 5, 15], 7))
    assert ResnetGenerator(TINY)(x).shape == (3, 1, 16, 16)


def test_cut_scales_match_percentile_of_cut_study(tiny_samples):
    scales = CutScales(tiny_samples)
    s = tiny_samples[0]
    for depth, side in [(0, "top"), (4, "top"), (9, "bottom"), (40, "top")]:
        cut, _ = cut_array(s.dwi.data, scales.extent[0], depth, side)
        expected = nearest_rank_percentile(cut)
        assert scales(0, depth, side) == (expected if expected > 0 else 1.0)
    assert scales(0, 0, "top") == 1.0
    assert scales(0, 9, "bottom") < 1.0


def test_rescale():
    x = np.array([0.0, 0.25, 0.5, 1.0], np.float32)
    assert rescale(x, 1.0) is x
    assert rescale(x, 0.5).tolist() == [0.0, 0.5, 1.0, 1.0]
