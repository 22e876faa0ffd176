import numpy as np
import pytest

from condsr.conditioning import ConditionError, ConditionSource, cache_conditions, condition_for
from condsr.image import (ImageTensor, ManifestEntry, bicubic_resize, load_image, save_image,
                          to_signed)

from conftest import quantized_image
from test_image import scalar_bicubic


def test_bicubic_constant():
    lr = ImageTensor(np.full((3, 5, 6), 0.3))
    c = condition_for(ConditionSource(), lr, 4, "x")
    assert c.shape == (3, 20, 24) and c.range_tag == "signed"
    np.testing.assert_allclose(c.data, 2 * 0.3 - 1, atol=1e-12)


def test_bicubic_x4_ramp_matches_scalar_oracle():
    ramp = ImageTensor((np.arange(64, dtype=float) / 63).reshape(1, 8, 8))
    c = condition_for(ConditionSource(), ramp, 4, "r")
    ref = 2 * np.clip(scalar_bicubic(ramp.data, 32, 32), 0, 1) - 1
    np.testing.assert_allclose(c.data, ref, atol=1e-12)


def test_external_pass_through(tmp_path, rs):
    hr = quantized_image(rs, 3, 16, 16)
    save_image(hr, tmp_path / "img1.png")
    lr = bicubic_resize(hr, 4, 4)
    c = condition_for(ConditionSource.external(tmp_path), lr, 4, "img1")
    np.testing.assert_array_equal(c.data, to_signed(hr).data)


def test_external_mapping_override(tmp_path, rs):
    hr = quantized_image(rs, 3, 8, 8)
    (tmp_path / "sub").mkdir()
    save_image(hr, tmp_path / "sub" / "other.png")
    (tmp_path / "map.tsv").write_text("img1\tsub/other.png\n")
    src = ConditionSource.external(None, tmp_path / "map.tsv")
    c = condition_for(src, bicubic_resize(hr, 2, 2), 4, "img1")
    np.testing.assert_array_equal(c.data, to_signed(hr).data)


def test_external_errors(tmp_path, rs):
    src = ConditionSource.external(tmp_path)
    lr = quantized_image(rs, 3, 4, 4)
    with pytest.raises(ConditionError, match="nope"):
        condition_for(src, lr, 4, "nope")
    save_image(quantized_image(rs, 3, 12, 16), tmp_path / "small.png")
    with pytest.raises(ConditionError, match=r"\(3, 16, 16\)"):
        condition_for(src, lr, 4, "small")
    with pytest.raises(ValueError):
        ConditionSource("external")
    with pytest.raises(ValueError):
        ConditionSource("learned")


def _entries(tmp_path, rs, n=2):
    entries = []
    for i in range(n):
        hr = quantized_image(rs, 3, 16, 16)
        save_image(hr, tmp_path / f"hr{i}.png")
        save_image(bicubic_resize(hr, 4, 4), tmp_path / f"lr{i}.png")
        entries.append(ManifestEntry(f"p{i}", tmp_path / f"hr{i}.png", tmp_path / f"lr{i}.png", 4))
    return entries


def test_cache_empty(tmp_path):
    m = cache_conditions(ConditionSource(), [], tmp_path / "c")
    assert m.read_text() == ""


def test_cache_matches_direct_within_quantization(tmp_path, rs):
    entries = _entries(tmp_path, rs)
    m = cache_conditions(ConditionSource(), entries, tmp_path / "c")
    assert m.read_text() == "p0\tp0.png\np1\tp1.png\n"
    for e in entries:
        direct = condition_for(ConditionSource(), load_image(e.lr_path), 4, e.id)
        cached = to_signed(load_image(tmp_path / "c" / f"{e.id}.png"))
        # One 8-bit step in unit range is 2/255 in signed range; rounding costs half of it.
        assert np.abs(cached.data - direct.data).max() <= 1 / 255 + 1e-12


def test_cache_is_idempotent(tmp_path, rs):
    entries = _entries(tmp_path, rs)
    out = tmp_path / "c"
    cache_conditions(ConditionSource(), entries, out)
    before = {p.name: p.stat().st_mtime_ns for p in out.iterdir()}
    import time
    time.sleep(0.01)
    cache_conditions(ConditionSource(), entries, out)
    after = {p.name: p.stat().st_mtime_ns for p in out.iterdir()}
    assert before == after
