import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from spotpatch.data import (Dataset, SyntheticTaskSpec, decode_boxes, distribution_params, encode_targets,
                            gen_task, source_params)
from spotpatch.evalmetrics import Box
from spotpatch.exceptions import ArgumentError


def small(**kw):
    kw.setdefault("n_train", 24)
    kw.setdefault("n_eval", 8)
    return SyntheticTaskSpec(**kw)


def test_same_spec_same_bytes():
    spec = small(seed=3, delta=0.4, variant_seed=2)
    assert gen_task(spec).to_bytes() == gen_task(spec).to_bytes()
    assert gen_task(spec).digest() != gen_task(spec, split="eval").digest()


def test_delta_zero_is_source_distribution():
    assert distribution_params(small(seed=0, delta=0.0, variant_seed=5)) == source_params(3)


def test_delta_zero_with_source_seed_reproduces_source_images():
    source = gen_task(small(seed=0, n_train=30))
    target = gen_task(small(name="target", seed=0, delta=0.0, variant_seed=9, n_train=10))
    assert np.array_equal(source.images[:10], target.images)


def test_delta_one_differs_from_source():
    far = distribution_params(small(delta=1.0, variant_seed=1))
    src = source_params(3)
    assert not np.allclose(far.colors, src.colors)
    assert not np.allclose(far.background, src.background)


def test_delta_interpolates_monotonically():
    src = source_params(3)
    d = [np.abs(distribution_params(small(delta=x, variant_seed=4)).background - src.background).sum()
         for x in (0.0, 0.3, 0.6, 1.0)]
    assert d == sorted(d) and d[0] == 0.0


@pytest.mark.parametrize("kw", [dict(n_classes=0), dict(delta=1.5), dict(channels=2),
                                dict(min_objects=3, max_objects=1)])
def test_invalid_specs(kw):
    with pytest.raises(ArgumentError):
        small(**kw)


@given(st.integers(0, 1000), st.floats(0, 1), st.sampled_from([1, 3]), st.integers(1, 6))
def test_boxes_inside_image_and_valid(seed, delta, channels, n_classes):
    spec = SyntheticTaskSpec(seed=seed, delta=delta, channels=channels, n_classes=n_classes, n_train=6)
    ds = gen_task(spec)
    assert ds.images.shape == (6, channels, 32, 32)
    assert ds.images.min() >= 0 and ds.images.max() <= 1
    for ann in ds.annotations:
        assert 1 <= len(ann) <= 3
        assert np.all(ann[:, 0] >= 0) and np.all(ann[:, 1] >= 0)
        assert np.all(ann[:, 2] <= 32) and np.all(ann[:, 3] <= 32)
        assert np.all(ann[:, 4] < n_classes)
        for row in ann:
            Box(*row[:4])


def test_one_object_per_grid_cell():
    ds = gen_task(small(seed=1, n_train=50, max_objects=3))
    cls, _ = encode_targets(ds.annotations, 32, 4)
    assert [int((c > 0).sum()) for c in cls] == [len(a) for a in ds.annotations]


def test_encode_decode_round_trip():
    ds = gen_task(small(seed=2))
    cls, box = encode_targets(ds.annotations, 32, 4)
    dec = decode_boxes(box, 32, 4)
    for n, ann in enumerate(ds.annotations):
        for x0, y0, x1, y1, c in ann:
            gy, gx = int(((y0 + y1) / 2) // 8), int(((x0 + x1) / 2) // 8)
            assert cls[n, gy, gx] == c + 1
            assert np.allclose(dec[n, gy, gx], [x0, y0, x1, y1], atol=1e-4)


def test_dataset_save_load(tmp_path):
    ds = gen_task(small(seed=4))
    ds.save(tmp_path / "d.npz")
    back = Dataset.load(tmp_path / "d.npz")
    assert back.to_bytes() == ds.to_bytes()


def test_gt_boxes_carry_image_ids():
    ds = gen_task(small(seed=5, n_train=4))
    ids = {b.image_id for b in ds.gt_boxes()}
    assert ids == set(range(4))


def test_unknown_split():
    with pytest.raises(ArgumentError):
        gen_task(small(), split="test")
