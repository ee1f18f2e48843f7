import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from rekd.data import (ConfigError, Dataset, DatasetSpec, ParseError, batch_iter, gen_planted,
                       load_table, save_table, split)
from rekd.tensor import Rng

SMALL = DatasetSpec(L=8, D=4, C=4, k_signal=2, n_train=40, n_dev=12, n_test=20, seed=3)


def test_splits_have_requested_sizes_and_balance():
    tr, dv, te = gen_planted(SMALL)
    assert (len(tr), len(dv), len(te)) == (40, 12, 20)
    for ds, n in ((tr, 40), (dv, 12), (te, 20)):
        assert np.array_equal(ds.class_counts(), [n // 4] * 4)
        assert ds.X.shape == (n, 8, 4) and ds.true_mask.sum(axis=1).tolist() == [2] * n


def test_generation_is_deterministic():
    a, b = gen_planted(SMALL), gen_planted(SMALL)
    for x, y in zip(a, b):
        assert np.array_equal(x.X, y.X) and np.array_equal(x.y, y.y)
    c = gen_planted(DatasetSpec(**{**SMALL.__dict__, "seed": 4}))
    assert not np.array_equal(a[0].X, c[0].X)


def test_noiseless_signal_rows_identify_class():
    spec = DatasetSpec(L=10, D=6, C=4, k_signal=3, n_train=40, n_dev=8, n_test=8, noise_std=0.0)
    tr, _, _ = gen_planted(spec)
    sig = np.stack([tr.X[tr.y == c][0][tr.true_mask[tr.y == c][0] == 1][0] for c in range(4)])
    for i in range(len(tr)):
        rows = tr.X[i][tr.true_mask[i] == 1]
        assert np.all(np.argmax(rows @ sig.T, axis=1) == tr.y[i])
        assert np.all(tr.X[i][tr.true_mask[i] == 0] == 0)


def test_spec_validation():
    with pytest.raises(ConfigError):
        DatasetSpec(k_signal=20).validate()
    with pytest.raises(ConfigError):
        DatasetSpec(n_train=801).validate()
    with pytest.raises(ConfigError):
        DatasetSpec(noise_std=-1.0).validate()


def _toy(n, C=2):
    return Dataset(np.arange(n * 2, dtype=float).reshape(n, 1, 2), np.arange(n) % C, None, C)


def test_split_sizes_and_exhaustive():
    ds = _toy(100)
    a, b = split(ds, [0.8, 0.2], seed=0)
    assert (len(a), len(b)) == (80, 20)
    keys = sorted(a.X[:, 0, 0].tolist() + b.X[:, 0, 0].tolist())
    assert keys == sorted(ds.X[:, 0, 0].tolist())
    assert np.array_equal(a.class_counts(), [40, 40]) and np.array_equal(b.class_counts(), [10, 10])


def test_split_validates_fractions():
    with pytest.raises(ConfigError):
        split(_toy(10), [0.5, 0.6], seed=0)
    with pytest.raises(ConfigError, match="empty"):
        split(_toy(4), [0.9, 0.1], seed=0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 30), st.lists(st.integers(1, 10), min_size=2, max_size=4), st.integers(0, 99))
def test_split_is_disjoint_and_exhaustive(per_class, weights, seed):
    ds = _toy(per_class * 3, C=3)
    fr = np.array(weights, dtype=float) / sum(weights)
    assume(fr.min() * per_class >= 1.0)
    parts = split(ds, fr, seed)
    ids = np.concatenate([p.X[:, 0, 0] for p in parts])
    assert sorted(ids.tolist()) == sorted(ds.X[:, 0, 0].tolist())
    for p, f in zip(parts, fr):
        # stratified: every class gets the floor or ceiling of its share
        counts = p.class_counts()
        assert np.all(np.abs(counts - f * per_class) < 1.0 + 1e-9)


def test_batch_iter_sizes_and_order():
    ds = _toy(10)
    assert [len(b) for b in batch_iter(ds, 3, None)] == [3, 3, 3, 1]
    a = np.concatenate([b.X[:, 0, 0] for b in batch_iter(ds, 3, Rng(1))])
    b = np.concatenate([b.X[:, 0, 0] for b in batch_iter(ds, 3, Rng(1))])
    assert np.array_equal(a, b) and sorted(a.tolist()) == sorted(ds.X[:, 0, 0].tolist())
    with pytest.raises(ConfigError):
        list(batch_iter(ds, 0, None))


def test_table_round_trip_bitwise(tmp_path):
    tr, _, _ = gen_planted(SMALL)
    path = tmp_path / "train.txt"
    save_table(path, tr)
    back = load_table(path)
    assert np.array_equal(back.X, tr.X) and np.array_equal(back.y, tr.y)
    assert np.array_equal(back.true_mask, tr.true_mask) and back.C == tr.C


def test_table_arity_error_names_line(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("#L=2 D=2 C=2\n0,1,2,3,4\n1,1,2,3\n")
    with pytest.raises(ParseError, match=":3:"):
        load_table(path)


def test_table_label_out_of_range(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("#L=1 D=1 C=2\n5,1.0\n")
    with pytest.raises(ValueError, match="label"):
        load_table(path)


def test_table_header_mismatch(tmp_path):
    path = tmp_path / "t.txt"
    path.write_text("#L=1 D=1 C=2\n1,1.0\n")
    with pytest.raises(ParseError):
        load_table(path, L=2)


def test_empty_file_is_empty_dataset(tmp_path):
    path = tmp_path / "empty.txt"
    path.write_text("")
    ds = load_table(path, L=3, D=2, C=2)
    assert len(ds) == 0 and ds.X.shape == (0, 3, 2)
    assert len(load_table(path)) == 0
