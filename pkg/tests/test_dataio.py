import numpy as np
import pytest

from emofm.dataio import (FIELD_SCHEMA, Records, SyntheticSpec, generate, iter_records, load_records,
                          planted_auc, split_by_day, write_records)
from emofm.errors import DataError, SchemaError, SpecError

HEADER = ",".join(FIELD_SCHEMA.header)


def _row(i, day=1, label=0, width=27):
    return ",".join(str(i + k) for k in range(width)) + f",{day},{label}"


def test_schema_layout():
    assert HEADER == ",".join([f"u{i}" for i in range(13)] + ["s0", "s1", "s2"] + [f"a{i}" for i in range(8)]
                              + ["ss0", "ss1", "type", "day", "label"])
    assert [FIELD_SCHEMA.width(s) for s in FIELD_SCHEMA.segment_names] == [13, 3, 8, 2, 1, 1]


def test_load_three_rows_in_order(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("\n".join([HEADER, _row(0, 1, 0), _row(5, 2, 1), _row(9, 30, 0)]) + "\n")
    recs = load_records(p)
    assert len(recs) == 3
    assert list(recs.features[:, 0]) == [0, 5, 9] and list(recs.day) == [1, 2, 30] and list(recs.label) == [0, 1, 0]


@pytest.mark.parametrize("bad,line", [
    (_row(0, width=26), 3),
    (_row(0).replace("2,", "x,", 1), 3),
    (_row(0, label=2), 3),
    (_row(0, day=31), 3),
    (_row(0).replace("1,", "-1,", 1), 3),
])
def test_malformed_rows_name_their_line(tmp_path, bad, line):
    p = tmp_path / "d.csv"
    p.write_text("\n".join([HEADER, _row(0), bad]) + "\n")
    with pytest.raises((DataError, SchemaError), match=f"line {line}"):
        load_records(p)


def test_bad_header(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("a,b,c\n" + _row(0) + "\n")
    with pytest.raises(DataError, match="line 1"):
        load_records(p)


def test_round_trip_and_streaming(tmp_path):
    recs = generate(SyntheticSpec(n_records=5000), 1)
    p = tmp_path / "g.csv"
    write_records(recs, p)
    assert load_records(p) == recs
    chunks = list(iter_records(p, chunk_size=1200))
    assert [len(c) for c in chunks] == [1200, 1200, 1200, 1200, 200]
    assert Records.concat(chunks) == recs
    raw = p.read_bytes()
    assert b"\r" not in raw and raw.startswith(HEADER.encode() + b"\n")


def test_generation_is_seed_deterministic(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    write_records(generate(SyntheticSpec(n_records=3000), 9), a)
    write_records(generate(SyntheticSpec(n_records=3000), 9), b)
    assert a.read_bytes() == b.read_bytes()
    assert generate(SyntheticSpec(n_records=3000), 10) != generate(SyntheticSpec(n_records=3000), 9)


def test_generated_values_are_in_range():
    recs = generate(SyntheticSpec(n_records=20000), 2)
    assert recs.features.min() >= 0
    assert set(np.unique(recs.types)) <= {0, 1, 2}
    assert recs.day.min() >= 1 and recs.day.max() <= 30
    assert set(np.unique(recs.label)) <= {0, 1}


@pytest.mark.parametrize("mode", ["planted", "null"])
def test_positive_rate_near_base_rate(mode):
    spec = SyntheticSpec(n_records=50000, mode=mode)
    rate = generate(spec, 3).label.mean()
    assert abs(rate - spec.base_rate) <= 0.2 * spec.base_rate


def test_planted_type_is_a_function_of_two_scene_columns():
    recs = generate(SyntheticSpec(n_records=20000), 4)
    s = recs.segment("scene")
    cells = {}
    for a, b, t in zip(s[:, 0], s[:, 1], recs.types):
        cells.setdefault((a, b), set()).add(t)
    assert all(len(v) == 1 for v in cells.values())
    assert np.bincount(recs.types, minlength=3).min() > 0.25 * len(recs)


def test_null_mode_types_are_uniform_and_labels_signal_free():
    recs, prob = generate(SyntheticSpec(n_records=30000, mode="null"), 5, return_prob=True)
    assert np.all(prob == prob[0])
    counts = np.bincount(recs.types, minlength=3) / len(recs)
    assert np.all(np.abs(counts - 1 / 3) < 0.02)


def test_planted_auc_near_target_and_monotone_in_scale():
    spec = SyntheticSpec()
    assert abs(planted_auc(spec, 0) - 0.80) < 0.02
    scaled = [planted_auc(SyntheticSpec(coef_scale=c), 0, 100000) for c in (0.5, 1.0, 1.5)]
    assert scaled[0] < scaled[1] < scaled[2]


def test_split_by_day():
    recs = generate(SyntheticSpec(n_records=1000), 6)
    train, test = split_by_day(recs)
    assert len(train) + len(test) == len(recs)
    assert np.all(train.day <= 29) and np.all(test.day == 30)
    all30 = Records(recs.features, np.full(len(recs), 30), recs.label)
    tr, te = split_by_day(all30)
    assert len(tr) == 0 and len(te) == len(recs)


def test_split_fraction_binomial_bound():
    recs = generate(SyntheticSpec(n_records=1_000_000, mode="null"), 7)
    _, test = split_by_day(recs)
    assert abs(len(test) / len(recs) - 1 / 30) <= 0.002


def test_split_rejects_bad_days():
    recs = generate(SyntheticSpec(n_records=10), 6)
    with pytest.raises(DataError):
        split_by_day(Records(recs.features, np.full(10, 31), recs.label))


def test_spec_validation():
    cards = SyntheticSpec().cardinalities
    cards["ad"][3] = 0
    with pytest.raises(SpecError):
        generate(SyntheticSpec(cardinalities=cards), 0)
    with pytest.raises(SpecError):
        SyntheticSpec.from_dict({"n_records": 5, "bogus": 1})
    with pytest.raises(SpecError):
        generate(SyntheticSpec(mode="other"), 0)
