import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tft.data import (
    Column,
    DatasetSchema,
    EntitySeries,
    SynthParams,
    chrono_split,
    collate,
    fit_normalize,
    leakage_violations,
    load_csv,
    make_windows,
    synth_generate,
    synth_schema,
    window_count,
    write_csv,
)
from tft.errors import ConfigError, DataError

SCHEMA = DatasetSchema(
    (
        Column("id", "entity_id"),
        Column("t", "time_index"),
        Column("y", "target"),
        Column("store", "static", "categorical", categories=("a", "b")),
        Column("size", "static"),
        Column("dow", "known", "categorical", cardinality=7),
        Column("temp", "observed"),
    ),
    presence_flag=True,
)
HEADER = "id,t,y,store,size,dow,temp\n"


def write(tmp_path, body, name="d.csv"):
    p = tmp_path / name
    p.write_text(HEADER + body)
    return p


def series(entity, values, t0=0, known=None):
    values = np.asarray(values, dtype=float)
    n = len(values)
    return EntitySeries(
        entity=entity,
        static=np.zeros(0),
        times=np.arange(t0, t0 + n),
        target=values,
        observed=np.zeros((n, 0)),
        known=np.zeros((n, 0)) if known is None else known,
    )


TARGET_ONLY = DatasetSchema((Column("id", "entity_id"), Column("t", "time_index"), Column("y", "target")))


# -- schema ----------------------------------------------------------------------------


def test_schema_requires_single_target():
    with pytest.raises(ConfigError):
        DatasetSchema((Column("id", "entity_id"), Column("t", "time_index")))


def test_schema_round_trip_and_variable_layout():
    assert DatasetSchema.from_dict(SCHEMA.to_dict()) == SCHEMA
    assert [v.name for v in SCHEMA.past_specs()] == ["y", "temp", "present", "dow"]
    assert [v.name for v in SCHEMA.future_specs()] == ["dow"]
    assert SCHEMA.static_specs()[0].cardinality == 2


def test_unknown_role_rejected():
    with pytest.raises(ConfigError):
        Column("x", "label")


# -- CSV --------------------------------------------------------------------------------


def test_empty_file_gives_no_series(tmp_path):
    assert load_csv(write(tmp_path, ""), SCHEMA) == []


def test_interleaved_entities_grouped_and_time_sorted(tmp_path):
    body = "b,2,5,a,1,0,0\na,1,1,b,2,1,0\nb,1,4,a,1,6,0\na,0,0,b,2,0,0\n"
    out = load_csv(write(tmp_path, body), SCHEMA)
    assert [s.entity for s in out] == ["a", "b"]
    assert out[0].times.tolist() == [0, 1] and out[0].target.tolist() == [0.0, 1.0]
    assert out[1].times.tolist() == [1, 2] and out[1].target.tolist() == [4.0, 5.0]
    assert out[0].static.tolist() == [2.0, 2.0]  # store "b" -> code 2


def test_gap_is_forward_filled_and_flagged(tmp_path):
    body = "a,0,1.5,a,1,0,10\na,4,2.5,a,1,4,20\n"
    (s,) = load_csv(write(tmp_path, body), SCHEMA)
    assert s.times.tolist() == [0, 1, 2, 3, 4]
    assert s.present.tolist() == [True, False, False, False, True]
    assert s.target.tolist() == [1.5, 1.5, 1.5, 1.5, 2.5]
    assert s.observed[:, 0].tolist() == [10, 10, 10, 10, 20]
    assert s.past_matrix(presence_flag=True)[:, 2].tolist() == [1, 0, 0, 0, 1]


def test_unknown_category_maps_to_reserved_code(tmp_path, caplog):
    body = "a,0,1,zzz,1,9,0\n"
    with caplog.at_level(logging.WARNING):
        (s,) = load_csv(write(tmp_path, body), SCHEMA)
    assert s.static[0] == 0.0 and s.known[0, 0] == 0.0
    assert "unknown categorical" in caplog.text


def test_unparseable_number_reports_line(tmp_path):
    body = "a,0,1,a,1,0,0\na,1,oops,a,1,0,0\n"
    with pytest.raises(DataError, match=r"d\.csv:3.*'y'"):
        load_csv(write(tmp_path, body), SCHEMA)


def test_duplicate_time_rejected(tmp_path):
    with pytest.raises(DataError, match="duplicate"):
        load_csv(write(tmp_path, "a,0,1,a,1,0,0\na,0,2,a,1,0,0\n"), SCHEMA)


def test_missing_columns_and_file(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("id,t\n")
    with pytest.raises(DataError, match="lacks"):
        load_csv(p, SCHEMA)
    with pytest.raises(DataError, match="not found"):
        load_csv(tmp_path / "nope.csv", SCHEMA)


def test_csv_round_trip(tmp_path):
    params = SynthParams(n_entities=3, length=30)
    data = synth_generate("seasonal", params, seed=1)
    schema = synth_schema("seasonal", params)
    write_csv(data, schema, tmp_path / "s.csv")
    back = load_csv(tmp_path / "s.csv", schema)
    for a, b in zip(data, back):
        assert a.entity == b.entity
        for f in ("times", "target", "observed", "known", "static"):
            np.testing.assert_array_equal(getattr(a, f), getattr(b, f))


# -- normalisation ---------------------------------------------------------------------------


def test_constant_column_normalises_to_zero():
    s = series("a", np.full(10, 3.0))
    norm = fit_normalize([s], TARGET_ONLY, 10)
    assert (norm.apply([s])[0].target == 0.0).all()


def test_normalise_round_trip():
    rng = np.random.default_rng(0)
    data = [series("a", rng.normal(5, 2, 40)), series("b", rng.normal(-3, 0.5, 40))]
    norm = fit_normalize(data, TARGET_ONLY, 30)
    back = norm.invert(norm.apply(data))
    for a, b in zip(data, back):
        assert np.abs(a.target - b.target).max() < 1e-10


def test_per_entity_training_mean_is_zero():
    rng = np.random.default_rng(1)
    data = [series("a", rng.normal(50, 2, 40)), series("b", rng.normal(-7, 3, 40))]
    out = fit_normalize(data, TARGET_ONLY, 30).apply(data)
    for s in out:
        assert abs(s.target[:30].mean()) < 1e-9


def test_statistics_ignore_rows_after_cutoff():
    data = [series("a", np.r_[np.zeros(10) + np.arange(10), np.full(10, 1e6)])]
    mu, sd = fit_normalize(data, TARGET_ONLY, 10).target_stats("a")
    assert mu == 4.5 and sd == pytest.approx(np.arange(10).std())


def test_unseen_entity_uses_dataset_statistics(caplog):
    data = [series("a", np.arange(10.0)), series("b", np.arange(10.0) * 3)]
    norm = fit_normalize(data, TARGET_ONLY, 10)
    with caplog.at_level(logging.WARNING):
        stats = norm.target_stats("c")
    assert stats == norm.fallback["y"]
    assert "absent" in caplog.text


# -- windows ---------------------------------------------------------------------------------


def test_window_counts():
    k, tau = 4, 3
    assert window_count(k + 1 + tau, k, tau) == 1
    assert window_count(k + 1 + tau + 5, k, tau) == 6
    assert window_count(k + tau, k, tau) == 0
    assert len(make_windows([series("a", np.zeros(k + 1 + tau + 5))], k, tau)) == 6


@settings(max_examples=30)
@given(st.integers(1, 60), st.integers(1, 6), st.integers(1, 4), st.integers(1, 3))
def test_windows_never_leak(length, k, tau, stride):
    s = series("a", np.arange(length, dtype=float), t0=7)
    windows = make_windows([s], k, tau, stride)
    assert len(windows) == window_count(length, k, tau, stride)
    assert leakage_violations(windows) == 0
    for w in windows:
        assert w.past[-1, 0] == w.start - 7  # value at time t is the last past row
        assert w.target[0] == w.start - 6


def test_leakage_scan_detects_bad_window():
    (w,) = make_windows([series("a", np.arange(4.0))], 1, 2)
    w.past_times = w.past_times + 1
    assert leakage_violations([w]) == 1


def test_collate_stacks():
    data = [series("a", np.arange(10.0), known=np.ones((10, 2)))]
    b = collate(make_windows(data, 3, 2))
    assert b.past.shape == (5, 4, 3) and b.future.shape == (5, 2, 2) and b.target.shape == (5, 2)


# -- splits ----------------------------------------------------------------------------------


def test_train_fraction_one_rejected():
    with pytest.raises(ConfigError):
        chrono_split([series("a", np.arange(100.0))], 4, 2, train_frac=1.0, val_frac=0.0)


def test_ninety_percent_training_range():
    split = chrono_split([series("a", np.arange(100.0))], 4, 2, 0.9, 0.1)
    assert split.boundaries["a"] == (90, 100)
    assert max(int(w.target_times[-1]) for w in split.train) == 89
    assert split.test == []


def test_no_training_target_reaches_validation():
    data = [series(e, np.arange(n, dtype=float)) for e, n in (("a", 100), ("b", 57))]
    split = chrono_split(data, 5, 3, 0.7, 0.2)
    for w in split.train:
        assert w.target_times.max() < split.boundaries[w.entity][0]
    for w in split.val:
        assert w.target_times.max() < split.boundaries[w.entity][1]
    assert split.test


def test_explicit_boundaries():
    split = chrono_split([series("a", np.arange(100.0))], 4, 2, boundaries=(60, 80))
    assert split.boundaries["a"] == (60, 80)
    with pytest.raises(ConfigError):
        chrono_split([series("a", np.arange(100.0))], 4, 2, boundaries=(80, 60))


# -- synthetic -------------------------------------------------------------------------------


def test_noiseless_seasonal_is_periodic():
    (s,) = synth_generate("seasonal", SynthParams(n_entities=1, length=200, noise=0.0, period=24), seed=3)
    np.testing.assert_allclose(s.target[24:], s.target[:-24], atol=1e-12)
    assert s.known[:, 0].tolist() == [(t % 24) + 1 for t in range(200)]


@pytest.mark.parametrize("kind", ["seasonal", "regime_switch", "noise_features"])
def test_synthetic_generation_is_deterministic(kind):
    a = synth_generate(kind, SynthParams(n_entities=3, length=80, switch_start=30, switch_end=50), seed=11)
    b = synth_generate(kind, SynthParams(n_entities=3, length=80, switch_start=30, switch_end=50), seed=11)
    for x, y in zip(a, b):
        for f in ("target", "observed", "known", "static"):
            assert np.array_equal(getattr(x, f), getattr(y, f))


def test_seasonal_autocorrelation_at_period():
    (s,) = synth_generate("seasonal", SynthParams(n_entities=1, length=2000, noise=0.1, amplitude=1.0), seed=0)
    y = s.target - s.target.mean()
    acf = (y[24:] * y[:-24]).sum() / (y * y).sum()
    assert acf > 0.9


def test_harmonic_waveform_keeps_sine_power():
    (s,) = synth_generate("seasonal", SynthParams(n_entities=1, length=2400, noise=0.0, harmonics=6), seed=2)
    assert s.target.std() == pytest.approx(np.sqrt(0.5), rel=1e-9)
    np.testing.assert_allclose(s.target[24:], s.target[:-24], atol=1e-12)


def test_regime_switch_changes_variance_in_segment():
    p = SynthParams(n_entities=20, length=400, switch_start=200, switch_end=300)
    data = synth_generate("regime_switch", p, seed=0)
    inside = np.concatenate([s.target[200:300] for s in data]).std()
    before = np.concatenate([s.target[:200] for s in data]).std()
    assert inside > 1.5 * before


def test_schema_matches_generated_columns():
    for kind in ("seasonal", "noise_features"):
        schema = synth_schema(kind, {"n_noise_features": 3})
        (s,) = synth_generate(kind, {"n_entities": 1, "length": 10, "n_noise_features": 3})
        assert s.observed.shape[1] == len(schema.observed)
    assert "signal" not in [c.name for c in synth_schema("noise_features").columns]


def test_bad_synthetic_parameters():
    with pytest.raises(ConfigError):
        synth_generate("trend")
    with pytest.raises(ConfigError):
        SynthParams.from_dict({"periods": 3})
    with pytest.raises(ConfigError):
        synth_generate("seasonal", {"harmonics": 0})
