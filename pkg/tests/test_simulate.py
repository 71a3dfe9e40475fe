import json

import numpy as np
import pytest

from isorec.degradation import DegradationOp
from isorec.simulate import (
    PhantomSpec,
    SimulationConfig,
    extract_lateral_patches,
    make_phantom,
    simulate_anisotropic,
    write_bundle,
)
from isorec.volume import VolumeGrid, load_volume

from oracles import explicit_degradation_matrix

SMALL = PhantomSpec(dims=(16, 16, 16), n_shells=2, n_filaments=2)


def test_phantom_deterministic_and_in_range():
    a, b = make_phantom(SMALL), make_phantom(SMALL)
    assert a == b
    assert a.data.min() >= 0 and a.data.max() <= 1
    c = make_phantom(PhantomSpec(**{**SMALL.to_dict(), "seed": 1}))
    assert not np.array_equal(a.data, c.data)


def test_texture_only_mean():
    spec = PhantomSpec(dims=(64, 64, 64), n_shells=0, n_filaments=0, texture=True, seed=3)
    vol = make_phantom(spec)
    assert abs(float(vol.data.mean()) - 0.5 * sum(spec.contrast)) <= 0.05


def test_centered_shell_brighter_than_center():
    spec = PhantomSpec(dims=(32, 32, 32), n_shells=1, n_filaments=0, texture=False, shell_radius=(10, 10))
    vol = make_phantom(spec).data[0]
    # locate the shell's center via the brightness-weighted centroid
    zz, yy, xx = np.indices(vol.shape)
    w = vol - vol.min()
    c = [int(round((g * w).sum() / w.sum())) for g in (zz, yy, xx)]
    assert vol[tuple(c)] < vol.max()


def test_degenerate_spec_rejected():
    with pytest.raises(ValueError):
        PhantomSpec(n_shells=0, n_filaments=0, texture=False)
    with pytest.raises(ValueError):
        PhantomSpec(dims=(8, 8, 8))


def test_simulate_shape_and_constant():
    gt = VolumeGrid(np.full((64, 8, 8), 0.3, np.float32))
    an = simulate_anisotropic(gt, 4.0, 8)
    assert an.dims == (8, 8, 8)
    assert an.spacing[0] == 8.0
    np.testing.assert_allclose(an.data, 0.3, atol=1e-6)


def test_simulate_matches_explicit_matrix():
    gt = make_phantom(SMALL)
    an = simulate_anisotropic(gt, 2.0, 4)
    op = DegradationOp(factor=4, sigma_z=2.0)
    A = explicit_degradation_matrix(16, 4, 2.0, op.kernel_radius, op.phase)
    expected = np.einsum("kz,zyx->kyx", A, gt.data[0].astype(np.float64))
    np.testing.assert_allclose(an.data[0], expected, atol=1e-6)


def test_channel_stacking_commutes():
    two = make_phantom(PhantomSpec(**{**SMALL.to_dict(), "channels": 2}))
    stacked = simulate_anisotropic(two, 2.0, 4)
    for c in range(2):
        single = simulate_anisotropic(VolumeGrid(two.data[c]), 2.0, 4)
        assert np.array_equal(stacked.data[c], single.data[0])


def test_patches_are_lateral_crops():
    an = simulate_anisotropic(make_phantom(SMALL), 2.0, 4)
    patches, origins = extract_lateral_patches(an, 8, 50, seed=2)
    assert patches.shape == (50, 1, 8, 8)
    for p, (z, y, x) in zip(patches, origins):
        assert np.array_equal(p, an.data[:, z, y : y + 8, x : x + 8])
    again, _ = extract_lateral_patches(an, 8, 50, seed=2)
    assert np.array_equal(patches, again)


def test_full_size_patches_are_whole_slices():
    an = simulate_anisotropic(make_phantom(SMALL), 2.0, 4)
    patches, origins = extract_lateral_patches(an, 16, 10, seed=0)
    assert np.all(origins[:, 1:] == 0)
    for p, z in zip(patches, origins[:, 0]):
        assert np.array_equal(p, an.data[:, z])


def test_patch_too_large():
    an = simulate_anisotropic(make_phantom(SMALL), 2.0, 4)
    with pytest.raises(ValueError):
        extract_lateral_patches(an, 17, 1)


def test_subwindow_alignment():
    gt = make_phantom(SMALL)
    # cropping the anisotropic volume laterally and in whole z-blocks commutes with simulation
    sub_gt = VolumeGrid(gt.data[:, 4:12, 2:10, 3:11])
    sub_an = simulate_anisotropic(sub_gt, 0.01, 4)
    full_an = simulate_anisotropic(gt, 0.01, 4)
    np.testing.assert_allclose(sub_an.data, full_an.data[:, 1:3, 2:10, 3:11], atol=1e-6)


def test_write_bundle(tmp_path):
    cfg = SimulationConfig(phantom=SMALL, patch=8, patch_count=20)
    out = write_bundle(cfg, tmp_path / "b")
    meta = json.loads((out / "bundle.json").read_text())
    assert meta["degradation"]["factor"] == 4
    gt, an, pt = (load_volume(out / f"{n}.volume") for n in ("gt", "aniso", "patches"))
    assert gt.dims == (16, 16, 16) and an.dims == (4, 16, 16) and pt.dims == (20, 8, 8)
