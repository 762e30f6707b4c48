import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from diffcode.errors import ContractError
from diffcode.tasks import (
    DEFAULT_TASKS,
    DegradationSpec,
    build_dataset,
    degrade,
    dump_dataset,
    generate_hq,
    load_dataset,
    make_splits,
)


def test_hq_deterministic_and_in_range():
    for t in range(3):
        a = generate_hq(5, 4, 32, t)
        b = generate_hq(5, 4, 32, t)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))
        assert all(x.shape == (32, 32) and x.min() >= 0 and x.max() <= 1 for x in a)
    assert not np.array_equal(generate_hq(5, 1, 32)[0], generate_hq(6, 1, 32)[0])


def test_hq_image_depends_only_on_its_index():
    whole = generate_hq(1, 5, 32, 2)
    assert np.array_equal(whole[3], generate_hq(1, 1, 32, 2, start=3)[0])


def test_hq_histogram_span():
    for t in range(3):
        for img in generate_hq(0, 20, 32, t):
            assert img.max() - img.min() >= 0.5


def test_hq_size_contract():
    with pytest.raises(ContractError):
        generate_hq(0, 1, 8)


def test_noise_sigma_zero_is_identity():
    img = generate_hq(0, 1, 32)[0]
    assert np.array_equal(degrade(img, DegradationSpec(1, "additive_noise", {"sigma": 0.0}), 3), img)


@given(st.floats(0.0, 1.0))
def test_sr_of_constant_is_identity(c):
    img = np.full((32, 32), c)
    np.testing.assert_allclose(degrade(img, DEFAULT_TASKS[0], 0), img, rtol=0, atol=1e-15)


def test_degradations_keep_shape_range_and_input():
    img = generate_hq(0, 1, 32)[0]
    before = img.copy()
    for spec in DEFAULT_TASKS:
        out = degrade(img, spec, 11)
        assert out.shape == img.shape and out.min() >= 0 and out.max() <= 1
        assert np.array_equal(out, degrade(img, spec, 11))
    assert np.array_equal(img, before)


def test_noise_statistics():
    img = np.full((100, 100), 0.5)
    d = degrade(img, DEFAULT_TASKS[1], 0) - img
    se = 0.1 / math.sqrt(d.size)
    assert abs(d.mean()) < 3 * se
    assert abs(d.std() - 0.1) < 0.005


def test_poisson_thinning_preserves_mean():
    img = np.full((100, 100), 0.4)
    out = degrade(img, DEFAULT_TASKS[2], 0)
    p = DEFAULT_TASKS[2].params
    lam = 0.4 * p["peak_counts"] * p["dose"]          # thinned counts are Poisson(lam)
    se = math.sqrt(lam) / (p["dose"] * p["peak_counts"]) / math.sqrt(img.size)
    assert abs(out.mean() - 0.4) < 3 * se


def test_unknown_kind_rejected():
    with pytest.raises(ContractError):
        DegradationSpec(0, "blur")


def test_splits_disjoint_deterministic_and_sized():
    s = make_splits(0, 10, 3, 4)
    for t, parts in s.items():
        assert [len(parts[k]) for k in ("train", "val", "test")] == [10, 3, 4]
        ids = np.concatenate(list(parts.values()))
        assert len(set(ids.tolist())) == 17
    all_ids = np.concatenate([np.concatenate(list(p.values())) for p in s.values()])
    assert len(set(all_ids.tolist())) == len(all_ids)
    again = make_splits(0, 10, 3, 4)
    assert all(np.array_equal(s[t][k], again[t][k]) for t in s for k in s[t])
    with pytest.raises(ContractError):
        make_splits(0, 0, 1, 1)


def test_dataset_dump_load_roundtrip(tmp_path):
    data = build_dataset(0, 2, 1, 1, 16)
    dump_dataset(data["train"], tmp_path / "train")
    back = load_dataset(tmp_path / "train")
    assert len(back) == len(data["train"]) == 6
    for a, b in zip(data["train"], back):
        assert (a.task_id, a.sample_id) == (b.task_id, b.sample_id)
        assert np.array_equal(a.i_lq, b.i_lq) and np.array_equal(a.i_hq, b.i_hq)
