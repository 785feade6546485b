import numpy as np
import pytest

from escim.data import (FeatureSchema, InteractionLog, Sample, batches, default_schema, downsample_indices,
                        load_csv, partition_spaces, split, write_csv)
from escim.errors import ContractError, DataIntegrityError, ParseError

from conftest import random_log


def test_csv_round_trip(tmp_path, tiny_schema):
    log = random_log(tiny_schema, 50, seed=1)
    write_csv(log, tmp_path / "log.csv")
    back = load_csv(tmp_path / "log.csv", tiny_schema)
    np.testing.assert_array_equal(back.features, log.features)
    np.testing.assert_array_equal(back.click, log.click)
    np.testing.assert_array_equal(back.conversion, log.conversion)
    first = (tmp_path / "log.csv").read_text().splitlines()[0]
    assert first == "user_id,item_id,ctx,click,conversion"


def test_sample_view_and_from_samples(tiny_schema):
    rows = [Sample(1, 2, (1, 2, 0), 1, 1), Sample(3, 4, (3, 4, 2), 0, 0)]
    log = InteractionLog.from_samples(tiny_schema, rows)
    assert log[0] == rows[0]
    assert log[1] == rows[1]
    assert len(log) == 2


@pytest.mark.parametrize("body, error, line", [
    ("user_id,item_id,ctx,click,conversion\n1,2,0,0,1\n", DataIntegrityError, None),
    ("user_id,item_id,ctx,click,conversion\n1,2,0,1\n", ParseError, 2),
    ("user_id,item_id,ctx,click,conversion\n1,2,0,1,1\n1,x,0,0,0\n", ParseError, 3),
    ("item_id,user_id,ctx,click,conversion\n", ParseError, 1),
    ("", ParseError, 1),
])
def test_malformed_csv(tmp_path, tiny_schema, body, error, line):
    path = tmp_path / "bad.csv"
    path.write_text(body)
    with pytest.raises(error) as info:
        load_csv(path, tiny_schema)
    if line is not None:
        assert info.value.line == line


def test_out_of_range_feature_is_rejected(tmp_path, tiny_schema):
    path = tmp_path / "bad.csv"
    path.write_text("user_id,item_id,ctx,click,conversion\n1,2,3,0,0\n")
    with pytest.raises(DataIntegrityError, match="ctx"):
        load_csv(path, tiny_schema)


def test_schema_validation():
    with pytest.raises(ContractError):
        FeatureSchema((("a", 2), ("a", 3)))
    with pytest.raises(ContractError):
        FeatureSchema((("a", 0),))
    with pytest.raises(ContractError):
        FeatureSchema((("click", 2),))
    s = default_schema()
    assert FeatureSchema.from_json(s.to_json()) == s
    assert s.hash64() == FeatureSchema.from_json(s.to_json()).hash64()


def test_partition_spaces(tiny_schema):
    log = random_log(tiny_schema, 200, seed=2)
    sp = partition_spaces(log)
    assert len(sp.C) + len(sp.N) == len(log)
    assert set(sp.V) <= set(sp.C)
    assert np.all(log.click[sp.C] == 1) and np.all(log.click[sp.N] == 0)


def test_split_is_a_seeded_partition(tiny_schema):
    log = random_log(tiny_schema, 101, seed=3)
    tr, va = split(log, 0.2, seed=5)
    assert len(tr) + len(va) == 101 and len(va) == 20
    tr2, va2 = split(log, 0.2, seed=5)
    np.testing.assert_array_equal(va.features, va2.features)
    with pytest.raises(ContractError):
        split(log, 1.0, 0)


def test_downsampling_keeps_all_clicks(tiny_schema):
    log = random_log(tiny_schema, 1000, seed=4, ctr=0.05)
    idx = downsample_indices(log, 3, seed=0)
    sp = partition_spaces(log)
    assert set(sp.C) <= set(idx)
    assert len(idx) - len(sp.C) == 3 * len(sp.C)
    np.testing.assert_array_equal(idx, np.sort(idx))


def test_batches_cover_each_row_once():
    out = batches(103, 10, seed=1, epoch=2)
    assert [len(b) for b in out] == [10] * 10 + [3]
    np.testing.assert_array_equal(np.sort(np.concatenate(out)), np.arange(103))
    again = batches(103, 10, seed=1, epoch=2)
    assert all(np.array_equal(a, b) for a, b in zip(out, again))
    assert not np.array_equal(np.concatenate(out), np.concatenate(batches(103, 10, seed=1, epoch=3)))
