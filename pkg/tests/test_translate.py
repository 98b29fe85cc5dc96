import csv

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from mar3d.dataset import DatasetConfig, build_paired_testset
from mar3d.nets import UNetGenerator
from mar3d.translate import (Direction, Mode, TranslateConfig, committed_slices, translate_batch, translate_volume,
                             window_schedule)
from mar3d.volumes import DomainTag, ValueSpace, Volume


class Counting(torch.nn.Module):
    def __init__(self, n, fn=lambda x: x):
        super().__init__()
        self.n_channels, self.fn, self.calls, self.inputs = n, fn, 0, []

    def forward(self, x):
        self.calls += 1
        self.inputs.append(x.clone())
        return self.fn(x)


def norm_volume(s, h=8, w=8, seed=0):
    data = np.random.default_rng(seed).uniform(-1, 1, (s, h, w)).astype(np.float32)
    return Volume(data, value_space=ValueSpace.NORMALIZED, volume_id="v")


@settings(max_examples=20, deadline=None)
@given(st.sampled_from([1, 3, 5]), st.integers(5, 12), st.sampled_from(list(Mode)), st.sampled_from(list(Direction)))
def test_identity_generator_is_identity(n, s, mode, direction):
    vol = norm_volume(s)
    out = translate_volume(Counting(n), vol, TranslateConfig(n, mode, direction))
    assert out == vol


def test_call_count():
    g = Counting(5)
    translate_volume(g, norm_volume(12), TranslateConfig(5))
    assert g.calls == 8


def test_n1_modes_agree():
    g = Counting(1, lambda x: torch.clamp(0.5 * x + 0.1 * x.mean(), -1, 1))
    vol = norm_volume(9)
    a = translate_volume(g, vol, TranslateConfig(1, Mode.SINGLE))
    b = translate_volume(g, vol, TranslateConfig(1, Mode.SEQUENTIAL))
    assert np.array_equal(a.data.view(np.uint32), b.data.view(np.uint32))


def test_commit_rule():
    assert list(committed_slices(0, 5, Direction.TOP_DOWN)) == [0, 1, 2, 3, 4]
    assert list(committed_slices(3, 5, Direction.TOP_DOWN)) == [4]
    assert list(committed_slices(3, 5, Direction.BOTTOM_UP)) == [0]
    assert window_schedule(7, 3, Direction.BOTTOM_UP) == [4, 3, 2, 1, 0]


def test_sequential_feeds_back_outputs():
    g = Counting(3, lambda x: x * 0.5)
    vol = norm_volume(5)
    out = translate_volume(g, vol, TranslateConfig(3, Mode.SEQUENTIAL))
    # second window: slices 1, 2 already halved once, slice 3 original
    second = g.inputs[1][0].numpy()
    np.testing.assert_allclose(second[:2], vol.data[1:3] * 0.5, rtol=1e-6)
    np.testing.assert_array_equal(second[2], vol.data[3])
    np.testing.assert_allclose(out.data, vol.data * 0.5, rtol=1e-6)

    g2 = Counting(3, lambda x: x * 0.5)
    translate_volume(g2, vol, TranslateConfig(3, Mode.SINGLE))
    np.testing.assert_array_equal(g2.inputs[1][0].numpy(), vol.data[1:4])


def test_bottom_up_commits_lowest_slice():
    g = Counting(3, lambda x: x * 0.5)
    vol = norm_volume(6)
    out = translate_volume(g, vol, TranslateConfig(3, Mode.SEQUENTIAL, Direction.BOTTOM_UP))
    assert g.inputs[0][0].numpy().tolist() == vol.data[3:6].tolist()
    np.testing.assert_allclose(out.data, vol.data * 0.5, rtol=1e-6)


def test_masked_edit_leaves_clean_slices():
    """A generator that only edits bright voxels leaves slices without them unchanged."""
    data = np.random.default_rng(1).uniform(-1, 0.5, (10, 8, 8)).astype(np.float32)
    data[4:6, 3:5, 3:5] = 1.0
    vol = Volume(data, value_space=ValueSpace.NORMALIZED)
    g = Counting(3, lambda x: torch.where(x > 0.9, x - 0.5, x))
    out = translate_volume(g, vol, TranslateConfig(3, Mode.SEQUENTIAL))
    clean = [z for z in range(10) if z not in (4, 5)]
    np.testing.assert_array_equal(out.data[clean], vol.data[clean])
    assert (out.data[4:6, 3:5, 3:5] == 0.5).all()


def test_errors():
    with pytest.raises(ValueError, match="at least N=5"):
        translate_volume(Counting(5), norm_volume(4), TranslateConfig(5))
    with pytest.raises(ValueError, match="3 slices"):
        translate_volume(Counting(3), norm_volume(8), TranslateConfig(5))
    with pytest.raises(ValueError, match="NORMALIZED"):
        translate_volume(Counting(3), Volume(np.zeros((4, 4, 4), np.float32)), TranslateConfig(3))


def test_metadata_preserved():
    vol = Volume(np.zeros((6, 8, 8), np.float32), spacing_mm=(2.0, 1.5, 1.5), value_space=ValueSpace.NORMALIZED,
                 volume_id="abc", domain_tag=DomainTag.X_ARTIFACT)
    out = translate_volume(UNetGenerator(3, depth=2, width=4), vol, TranslateConfig(3))
    assert (out.shape, out.spacing_mm, out.volume_id) == (vol.shape, vol.spacing_mm, vol.volume_id)


def test_translate_batch(tmp_path):
    cfg = DatasetConfig(seed=1, n_test_phantoms=1, m_values=(1, 2), slice_range=(6, 6), image_size=(80, 80))
    manifest = build_paired_testset(cfg, tmp_path / "test")
    torch.manual_seed(0)
    g = UNetGenerator(3, depth=2, width=4)
    torch.nn.init.normal_(g.head.weight, std=0.1)
    outs = translate_batch(g, manifest, TranslateConfig(3), tmp_path / "out")
    again = translate_batch(g, manifest, TranslateConfig(3), tmp_path / "out2")
    assert len(outs) == 2 and all(np.abs(o.data).max() <= 1 for o in outs)
    assert all(a == b for a, b in zip(outs, again))
    with open(tmp_path / "out" / "timing.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["volume_id"] for r in rows] == ["test-000-m1", "test-000-m2"]
    assert all(float(r["seconds"]) >= 0 for r in rows)
