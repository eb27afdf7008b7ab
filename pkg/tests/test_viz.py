import json

import numpy as np
import pytest
import torch
from PIL import Image

from gebd_ssl.config import resolve
from gebd_ssl.data import random_scene_spec, render_scene
from gebd_ssl.encoder import EncoderConfig, VideoEncoder
from gebd_ssl.viz import confidence_maps, footprint_grid, inside_outside_ratio, write_confidence_pngs


@pytest.fixture(scope="module")
def encoder():
    torch.manual_seed(0)
    return VideoEncoder(EncoderConfig.from_run_config(resolve(profile="desk")))


def clip(seed=5, length=20):
    spec = random_scene_spec(seed, length=length, n_events=(1, 1), margin=2)
    spec.events = []
    return render_scene(spec, with_footprint=True)


def test_confidence_maps_shape_and_range(encoder):
    frames, _ = clip()
    x = torch.from_numpy(frames).float() / 255
    conf = confidence_maps(encoder, x, chunk=6)
    assert conf.shape == (20, 4, 4)
    assert np.all(np.isfinite(conf)) and np.all(conf > 0)
    np.testing.assert_array_equal(conf[-1], conf[-2])


def test_confidence_chunking_matches_single_pass(encoder):
    frames, _ = clip(length=9)
    x = torch.from_numpy(frames).float() / 255
    # TSM mixes neighbouring frames, so only the single-chunk case is an exact reference
    full = confidence_maps(encoder, x, chunk=9)
    again = confidence_maps(encoder, x, chunk=9)
    np.testing.assert_array_equal(full, again)
    assert confidence_maps(encoder, x, chunk=4).shape == full.shape


def test_confidence_rejects_short_input(encoder):
    with pytest.raises(ValueError):
        confidence_maps(encoder, torch.rand(1, 3, 32, 32))
    with pytest.raises(ValueError):
        confidence_maps(encoder, torch.rand(4, 3, 32, 32), chunk=1)


def test_footprint_grid_coverage_rule():
    foot = np.zeros((1, 8, 8))
    foot[0, :4, :4] = 1.0  # exactly one 4x4 cell of a 2x2 grid
    foot[0, 4:, 4:6] = 0.6  # 0.3 coverage of the bottom-right cell
    foot[0, :4, 4:5] = 0.8  # 0.2 of the top-right cell
    mask = footprint_grid(foot, (2, 2))
    assert mask[0].tolist() == [[True, False], [False, True]]


def test_inside_outside_ratio():
    conf = np.array([[[4.0, 1.0], [1.0, 2.0]]])
    mask = np.array([[[True, False], [False, True]]])
    assert inside_outside_ratio(conf, mask) == (3.0, 1.0, 3.0)
    with pytest.raises(ValueError):
        inside_outside_ratio(conf, np.zeros_like(mask))
    with pytest.raises(ValueError):
        inside_outside_ratio(conf, np.ones_like(mask))


def test_write_pngs_and_sidecar(tmp_path):
    conf = np.linspace(0.2, 0.6, 3 * 4 * 4).reshape(3, 4, 4)
    path = write_confidence_pngs(conf, tmp_path, "v0", upscale_to=32)
    meta = json.loads(path.read_text())
    assert meta["frames"] == ["conf_000000.png", "conf_000001.png", "conf_000002.png"]
    assert meta["raw_min"] == pytest.approx(0.2) and meta["raw_max"] == pytest.approx(0.6)
    assert meta["grid"] == [4, 4] and meta["video_id"] == "v0"
    first = np.asarray(Image.open(tmp_path / "conf_000000.png"))
    last = np.asarray(Image.open(tmp_path / "conf_000002.png"))
    assert first.shape == (32, 32) and first.dtype == np.uint8
    assert first[0, 0] == 0 and last[-1, -1] == 255


def test_constant_map_writes_black(tmp_path):
    write_confidence_pngs(np.full((2, 4, 4), 0.3), tmp_path, "flat")
    assert np.asarray(Image.open(tmp_path / "conf_000001.png")).max() == 0
