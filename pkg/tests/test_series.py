import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from talon.series import (
    CsvSchema,
    MultivariateSeries,
    RegimeSpec,
    SeriesError,
    SynthSpec,
    chronological_split,
    destandardize,
    load_csv,
    make_windows,
    segment,
    standardize,
    synth_generate,
    write_csv,
)


def _hourly(n):
    return tuple(f"2016-07-{1 + i // 24:02d} {i % 24:02d}:00:00" for i in range(n))


def test_csv_roundtrip(tmp_path):
    values = np.random.default_rng(0).normal(size=(30, 3))
    s = MultivariateSeries(_hourly(30), values, ("HUFL", "HULL", "OT"))
    path = tmp_path / "d.csv"
    write_csv(s, path)
    back = load_csv(path)
    assert back.timestamps == s.timestamps
    assert back.channel_names == s.channel_names
    assert np.array_equal(back.values, s.values)


def test_csv_value_column_selection(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("date,a,b\n0,1,2\n1,3,4\n")
    s = load_csv(path, CsvSchema("date", ["b"]))
    assert s.values[:, 0].tolist() == [2.0, 4.0]


@pytest.mark.parametrize(
    "text, match",
    [
        ("date,a\n", "no rows"),
        ("", "no rows"),
        ("time,a\n0,1\n", "missing column"),
        ("date,a\n0,x\n", "unparseable cell"),
        ("date,a\nyesterday,1\n", "unparseable timestamp"),
        ("date,a\n1,1\n0,2\n", "strictly increasing"),
    ],
)
def test_csv_errors(tmp_path, text, match):
    path = tmp_path / "bad.csv"
    path.write_text(text)
    with pytest.raises(SeriesError, match=match):
        load_csv(path)


def test_values_are_read_only():
    s = MultivariateSeries.from_array(np.zeros((5, 2)))
    with pytest.raises(ValueError):
        s.values[0, 0] = 1.0


def test_split_counts_and_fractions():
    s = MultivariateSeries.from_array(np.arange(100.0))
    tr, va, te = chronological_split(s, counts=(60, 20, 20))
    assert (tr.length, va.length, te.length) == (60, 20, 20)
    assert va.values[0, 0] == 60.0 and te.values[-1, 0] == 99.0
    tr, va, te = chronological_split(s, fractions=(0.7, 0.1, 0.2))
    assert (tr.length, va.length, te.length) == (70, 10, 20)
    # counts take precedence over fractions
    tr, _, _ = chronological_split(s, counts=(50, 25, 25), fractions=(0.7, 0.1, 0.2))
    assert tr.length == 50
    with pytest.raises(SeriesError):
        chronological_split(s, counts=(90, 10, 10))


def test_window_count_per_channel():
    s = MultivariateSeries.from_array(np.zeros((200, 3)))
    w = make_windows(s, L=48, H=16)
    assert len(w) == 3 * (200 - 48 - 16 + 1)
    w2 = make_windows(s, L=48, H=16, stride=10)
    assert len(w2) == 3 * len(range(0, 200 - 64 + 1, 10))


def test_window_contents_and_stats():
    x = np.arange(100.0)
    w = make_windows(MultivariateSeries.from_array(x), L=10, H=5)[7]
    assert w.lookback.tolist() == x[7:17].tolist()
    assert w.target.tolist() == x[17:22].tolist()
    assert w.norm_stats == (pytest.approx(x[7:17].mean()), pytest.approx(x[7:17].std()))
    assert len(w.timestamps) == 15


def test_segment_metadata():
    patches, metas = segment(np.arange(12.0), 4, tuple(range(100, 112)))
    assert patches.shape == (3, 4)
    m = metas[1]
    assert (m.index, m.token_len, m.patch_start, m.patch_end, m.x_start, m.x_end, m.seq_len) == (2, 4, 104, 107, 100, 111, 12)
    with pytest.raises(SeriesError):
        segment(np.arange(10.0), 4)


def test_standardize_constant_uses_floor():
    z, (mean, std) = standardize(np.full(8, 3.0))
    assert std == 1e-5 and np.all(z == 0)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(2, 64), elements=st.floats(-1e4, 1e4)))
def test_standardize_roundtrip(x):
    z, stats = standardize(x)
    assert np.allclose(destandardize(z, stats), x, atol=1e-9 * max(1.0, np.abs(x).max()))


def test_synth_is_deterministic_with_labels():
    spec = SynthSpec([RegimeSpec("linear-trend", 10), RegimeSpec("sinusoid", 10), RegimeSpec("ar1", 10)], 65, 2)
    a, la = synth_generate(spec, 5)
    b, lb = synth_generate(spec, 5)
    assert np.array_equal(a.values, b.values) and np.array_equal(la, lb)
    assert la[:10].tolist() == [0] * 10 and la[10:20].tolist() == [1] * 10 and la[60:].tolist() == [0] * 5
    assert not np.allclose(a.values[:, 0], a.values[:, 1])
    assert np.all(np.diff(a.values[:10, 0]) > 0)


def test_synth_unknown_regime():
    with pytest.raises(SeriesError, match="unknown regime"):
        synth_generate(SynthSpec([RegimeSpec("chaos", 5)], 10), 0)
