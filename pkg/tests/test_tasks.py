import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mumis.data import LabeledDataset
from mumis.tasks import (
    Mode,
    SpecError,
    SplitIndices,
    TaskSpec,
    advance_sequence,
    build_split,
    cached_split,
    cumulative_spec,
    split_cache_key,
)


def balanced(n_per_class=100, classes=10, n_test_per_class=10, coarse_map=None):
    n_train = n_per_class * classes
    n_test = n_test_per_class * classes
    labels = np.concatenate([np.repeat(np.arange(classes), n_per_class), np.repeat(np.arange(classes), n_test_per_class)])
    images = torch.zeros(len(labels), 1, 2, 2)
    return LabeledDataset(
        name="toy",
        images=images,
        labels=torch.from_numpy(labels),
        train_idx=np.arange(n_train),
        test_idx=np.arange(n_train, n_train + n_test),
        num_classes=classes,
        coarse_map=coarse_map,
    )


@pytest.fixture(scope="module")
def toy():
    return balanced()


def test_full_class_balanced_arithmetic(toy):
    split = build_split(TaskSpec("full_class", (3,)), toy)
    assert len(split.forget) == 100
    assert len(split.remain) == 900
    assert set(toy.labels.numpy()[split.forget]) == {3}
    assert 3 not in split.label_space


def test_random_subset_uses_ceiling():
    ds = balanced(n_per_class=5000, n_test_per_class=1)
    split = build_split(TaskSpec("random_subset", (0.10,), seed=4), ds)
    assert len(split.forget) == 5000
    odd = build_split(TaskSpec("random_subset", (0.333,), seed=4), balanced(n_per_class=1, classes=10))
    assert len(odd.forget) == 4  # ceil(3.33)


def test_split_deterministic(toy):
    spec = TaskSpec("random_subset", (0.25,), seed=11)
    a, b = build_split(spec, toy), build_split(spec, toy)
    assert a == b
    assert a.digest() == b.digest()
    other = build_split(TaskSpec("random_subset", (0.25,), seed=12), toy)
    assert other != a


def test_split_indices_are_sorted_and_disjoint_from_test(toy):
    split = build_split(TaskSpec("random_subset", (0.3,), seed=1), toy)
    for arr in (split.forget, split.remain, split.test):
        assert np.all(np.diff(arr) > 0)
    assert not set(split.test) & set(split.forget) | (set(split.test) & set(split.remain))


@settings(max_examples=40, deadline=None)
@given(
    mode=st.sampled_from(["full_class", "random_subset"]),
    cls=st.lists(st.integers(0, 9), min_size=1, max_size=4, unique=True),
    frac=st.floats(0.01, 1.0),
    seed=st.integers(0, 2**16),
)
def test_partition_property(toy, mode, cls, frac, seed):
    targets = (frac,) if mode == "random_subset" else tuple(cls)
    split = build_split(TaskSpec(mode, targets, seed=seed), toy)
    f, r = set(split.forget.tolist()), set(split.remain.tolist())
    assert not f & r
    assert f | r == set(toy.train_idx.tolist())


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(mode="full_class", targets=()),
        dict(mode="random_subset", targets=(0.0,)),
        dict(mode="random_subset", targets=(1.5,)),
        dict(mode="random_subset", targets=(0.1, 0.2)),
        dict(mode="full_class", targets=(1, 1)),
        dict(mode="full_class", targets=(1.5,)),
        dict(mode="sequential", targets=(1,)),
        dict(mode="sequential", targets=(1, 2), request_mode="random_subset"),
        dict(mode="sub_class", targets=(1,)),
    ],
)
def test_invalid_specs_rejected(kwargs):
    with pytest.raises(SpecError):
        TaskSpec(**kwargs)


def test_unknown_class_is_spec_error(toy):
    with pytest.raises(SpecError, match="unknown class"):
        build_split(TaskSpec("full_class", (42,)), toy)


def test_empty_forget_is_spec_error():
    ds = balanced()
    # class 9 has no training samples in this variant
    keep = np.flatnonzero(ds.labels.numpy()[ds.train_idx] != 9)
    ds2 = LabeledDataset("toy2", ds.images, ds.labels, ds.train_idx[keep], ds.test_idx, 10)
    with pytest.raises(SpecError):
        build_split(TaskSpec("full_class", (9,)), ds2)


def test_fraction_one_forgets_everything(toy):
    split = build_split(TaskSpec("random_subset", (1.0,)), toy)
    assert len(split.forget) == len(toy.train_idx)
    assert len(split.remain) == 0


def test_sub_class_exposes_coarse_labels():
    cmap = {f: f // 2 for f in range(10)}
    ds = balanced(coarse_map=cmap)
    split = build_split(TaskSpec("sub_class", (3,), superclass_map=cmap), ds)
    assert split.granularity == "coarse"
    assert len(split.forget) == 100
    assert set(split.label_space) == set(range(5))
    # the forgotten fine class's superclass keeps support through class 2
    coarse_remain = {cmap[int(c)] for c in ds.labels.numpy()[split.remain]}
    assert cmap[3] in coarse_remain


def test_sub_class_map_must_cover_labels():
    ds = balanced()
    with pytest.raises(SpecError, match="superclass_map"):
        build_split(TaskSpec("sub_class", (3,), superclass_map={3: 0}), ds)


def test_advance_sequence_steps():
    spec = TaskSpec("sequential", (4, 1, 7, 2, 0))
    s0 = advance_sequence(spec, 0)
    assert s0.request.targets == (4,) and s0.forgotten_before == frozenset()
    assert s0.request.mode is Mode.FULL_CLASS
    s2 = advance_sequence(spec, 2)
    assert s2.request.targets == (7,) and s2.forgotten_before == {4, 1}
    with pytest.raises(SpecError):
        advance_sequence(spec, 5)
    with pytest.raises(SpecError):
        advance_sequence(spec, -1)


def test_advance_requires_sequential():
    with pytest.raises(SpecError):
        advance_sequence(TaskSpec("full_class", (1,)), 0)


def test_cumulative_spec():
    spec = TaskSpec("sequential", (4, 1, 7))
    assert cumulative_spec(spec, 1) == TaskSpec("full_class", (4, 1))


def test_sequential_split_is_union(toy):
    split = build_split(TaskSpec("sequential", (2, 5)), toy)
    assert set(toy.labels.numpy()[split.forget]) == {2, 5}


def test_taskspec_json_roundtrip():
    spec = TaskSpec("sequential", (3, 1), seed=5, superclass_map={1: 0, 3: 1}, request_mode="sub_class")
    again = TaskSpec.from_json(spec.to_json())
    assert again == spec
    assert json.loads(spec.to_json())["superclass_map"] == {"1": 0, "3": 1}


def test_malformed_document():
    with pytest.raises(SpecError):
        TaskSpec.from_dict({"targets": [1]})


def test_split_indices_roundtrip(toy):
    split = build_split(TaskSpec("full_class", (0, 4)), toy)
    assert SplitIndices.from_dict(json.loads(json.dumps(split.to_dict()))) == split


def test_cached_split(tmp_path, toy):
    spec = TaskSpec("random_subset", (0.2,), seed=3)
    a = cached_split(spec, toy, tmp_path)
    files = list(tmp_path.glob("split_*.json"))
    assert [f.name for f in files] == [f"split_{split_cache_key(spec, toy)}.json"]
    b = cached_split(spec, toy, tmp_path)
    assert a == b
    assert split_cache_key(spec, toy) != split_cache_key(TaskSpec("random_subset", (0.2,), seed=4), toy)
