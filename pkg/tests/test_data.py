import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chi2

from mtlforge.data import (
    CANONICAL_EMOTION,
    REPORTING_SEEDS,
    DataError,
    Dataset,
    Example,
    SplitSpec,
    builtin_schemas,
    dumps_dataset,
    get_schema,
    goemotions_splits,
    load_dataset,
    save_dataset,
    split,
    subsample,
    synth_generate,
    synth_lexicon,
)
from mtlforge.rng import Xoshiro256, _splitmix64

PHM = builtin_schemas()["phm2017"]


def make_ds(n, space=PHM):
    labels = space.labels
    return Dataset("d", space, [Example(str(i), f"text {i}", labels[i % len(labels)]) for i in range(n)])


def write_jsonl(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")


# --- generator reference values ---------------------------------------------


def test_splitmix64_reference_output():
    assert _splitmix64(1234567)[1] == 6457827717110365317


def test_xoshiro_reference_sequence():
    rng = Xoshiro256(0)
    rng._s = [1, 2, 3, 4]
    assert [rng.next_u64() for _ in range(4)] == [11520, 0, 1509978240, 1215971899390074240]


def test_xoshiro_streams_and_bounds():
    a = [Xoshiro256(5, 0).next_u64() for _ in range(3)]
    assert a != [Xoshiro256(5, 1).next_u64() for _ in range(3)]
    rng = Xoshiro256(9)
    draws = [rng.randbelow(7) for _ in range(2000)]
    assert set(draws) == set(range(7))
    assert all(0.0 <= rng.random() < 1.0 for _ in range(1000))
    assert sorted(Xoshiro256(1).permutation(50)) == list(range(50))


# --- schemas ----------------------------------------------------------------


def test_builtin_schemas_exact():
    s = builtin_schemas()
    assert s["phm2017"].labels == ("non-health", "awareness", "other-mention", "self-mention")
    assert s["hmc2019"].labels == ("health mention", "other mention", "figurative mention")
    assert s["self2020"].labels == ("no self-disclosure", "possible self-disclosure", "clear self-disclosure")
    assert s["ill2021"].labels == ("negative", "positive")
    assert s["goemotions"].labels == ("anger", "disgust", "fear", "joy", "sadness", "surprise", "neutral")
    assert [s[k].K for k in ("phm2017", "hmc2019", "self2020", "ill2021", "goemotions")] == [4, 3, 3, 2, 7]
    assert get_schema("PHM2017") == s["phm2017"]
    with pytest.raises(DataError):
        get_schema("imdb")


# --- loading ----------------------------------------------------------------


def test_load_three_lines_in_order(tmp_path):
    p = tmp_path / "d.jsonl"
    write_jsonl(p, [{"text": "a b", "label": "awareness"}, {"id": "x", "text": "c", "label": "non-health"},
                    {"text": "d", "label": "self-mention"}])
    ds = load_dataset(p, PHM)
    assert [e.id for e in ds.examples] == ["1", "x", "3"]
    assert ds.targets == [1, 0, 3]


def test_load_rejects_unknown_label_with_line_number(tmp_path):
    p = tmp_path / "d.jsonl"
    write_jsonl(p, [{"text": "a", "label": "awareness"}, {"text": "b", "label": "happy"}])
    with pytest.raises(DataError, match=r"line 2.*happy"):
        load_dataset(p, PHM)


@pytest.mark.parametrize("line, message", [
    ("{not json", "malformed"),
    ('["a"]', "object"),
    ('{"text": "", "label": "awareness"}', "empty"),
    ('{"text": "a", "label": "awareness", "x": 1}', "unexpected"),
])
def test_load_rejects_malformed_lines(tmp_path, line, message):
    p = tmp_path / "d.jsonl"
    p.write_text('{"text": "ok", "label": "awareness"}\n' + line + "\n", encoding="utf-8")
    with pytest.raises(DataError, match=f"line 2.*{message}"):
        load_dataset(p, PHM)


def test_duplicate_ids_rejected(tmp_path):
    p = tmp_path / "d.jsonl"
    write_jsonl(p, [{"id": "a", "text": "x", "label": "awareness"}, {"id": "a", "text": "y", "label": "awareness"}])
    with pytest.raises(DataError, match="duplicate"):
        load_dataset(p, PHM)


def test_table_sized_file_loads(tmp_path):
    p = tmp_path / "phm.jsonl"
    save_dataset(make_ds(4987), p)
    assert len(load_dataset(p, PHM)) == 4987


def test_round_trip_is_byte_identical(tmp_path):
    p = tmp_path / "d.jsonl"
    primary, _ = synth_generate(60, seed=3)
    save_dataset(primary, p)
    assert dumps_dataset(load_dataset(p, PHM)).encode() == p.read_bytes()


def test_goemotions_official_splits(tmp_path):
    emo = builtin_schemas()["goemotions"]
    paths = []
    for name, n in (("train", 1000), ("val", 100), ("test", 100)):
        path = tmp_path / f"{name}.jsonl"
        save_dataset(make_ds(n, emo), path)
        paths.append(path)
    assert [len(d) for d in goemotions_splits(*paths)] == [1000, 100, 100]
    paths[1].write_text("", encoding="utf-8")
    with pytest.warns(UserWarning, match="empty"):
        tr, va, te = goemotions_splits(*paths)
    assert len(va) == 0
    # files are taken as given, without reshuffling
    assert [e.id for e in tr.examples] == [str(i) for i in range(1000)]


# --- splitting --------------------------------------------------------------


def test_split_sizes():
    assert [len(d) for d in split(make_ds(10), SplitSpec(seed=1))] == [8, 1, 1]
    n = 4987
    expected = (int(0.8 * n), int(0.1 * n), n - int(0.8 * n) - int(0.1 * n))
    assert expected == (3989, 498, 500)
    assert SplitSpec(seed=0).sizes(n) == expected


def test_split_needs_ten_examples():
    with pytest.raises(DataError):
        split(make_ds(9), SplitSpec(seed=0))
    with pytest.raises(DataError):
        SplitSpec(seed=0, train_frac=0.9, val_frac=0.2)


def test_split_deterministic_and_seed_dependent():
    ds = make_ds(100)
    a = [[e.id for e in part.examples] for part in split(ds, SplitSpec(seed=69556))]
    b = [[e.id for e in part.examples] for part in split(ds, SplitSpec(seed=69556))]
    c = [[e.id for e in part.examples] for part in split(ds, SplitSpec(seed=79719))]
    assert a == b and a != c


@settings(max_examples=40, deadline=None)
@given(st.integers(10, 20000), st.sampled_from(REPORTING_SEEDS))
def test_split_partition_property(n, seed):
    ids = [str(i) for i in range(n)]
    ds = Dataset("d", PHM, [Example(i, "t", "awareness") for i in ids])
    parts = split(ds, SplitSpec(seed=seed))
    seen = [e.id for part in parts for e in part.examples]
    assert sorted(seen) == sorted(ids) and len(set(seen)) == n


def test_subsample():
    ds = make_ds(50)
    sub = subsample(ds, 20, 3)
    assert len(sub) == 20 and len({e.id for e in sub.examples}) == 20
    assert subsample(ds, 20, 3).examples == sub.examples
    assert subsample(ds, 80, 3) is ds


# --- synthetic pair ---------------------------------------------------------


def test_synth_deterministic_and_paired():
    p1, a1 = synth_generate(200, seed=4)
    p2, a2 = synth_generate(200, seed=4)
    assert dumps_dataset(p1) == dumps_dataset(p2) and dumps_dataset(a1) == dumps_dataset(a2)
    assert p1.texts == a1.texts
    assert [e.id for e in p1.examples] == [e.id for e in a1.examples]


def test_synth_full_correlation_is_a_function_of_keywords():
    primary, aux = synth_generate(100, seed=2, correlation=1.0)
    lex = synth_lexicon(400, 2)
    owner = {w: lab for lab, ws in lex.health.items() for w in ws}
    for p, a in zip(primary.examples, aux.examples):
        keys = [owner[w] for w in p.text.split() if w in owner]
        assert keys == [p.label]
        assert a.label == CANONICAL_EMOTION[keys[0]]


def test_synth_zero_correlation_is_independent():
    primary, aux = synth_generate(5000, seed=11, correlation=0.0)
    table = Counter(zip((e.label for e in primary.examples), (e.label for e in aux.examples)))
    rows = PHM.labels
    cols = builtin_schemas()["goemotions"].labels
    obs = np.array([[table[(r, c)] for c in cols] for r in rows], dtype=float)
    expected = obs.sum(1, keepdims=True) * obs.sum(0, keepdims=True) / obs.sum()
    stat = ((obs - expected) ** 2 / expected).sum()
    assert stat < chi2.ppf(0.99, (len(rows) - 1) * (len(cols) - 1))


def test_synth_validation():
    with pytest.raises(DataError):
        synth_generate(19)
    with pytest.raises(DataError):
        synth_generate(100, correlation=1.2)
