import dataclasses
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from omlog.corpus import ABNORMAL, NORMAL, split_train_test
from omlog.detectors import DetectionVerdict
from omlog.pipeline import (Detector, Metrics, Mode, StreamConfig, batches_of, evaluate, fit_detector, run_stream,
                            sweep)
from omlog.synth import single_regime_spec, synthesize

from conftest import tiny_stream_config
from oracles import confusion_metrics


def with_mode(cfg, mode, **drift):
    return dataclasses.replace(cfg, mode=mode, drift=dataclasses.replace(cfg.drift, **drift))


def verdicts_of(report):
    return [(v["anomalous"], v["offending"]) for v in report.verdicts]


# -- metrics ---------------------------------------------------------------------

def test_metrics_examples():
    m = Metrics.from_counts(3, 1, 5, 1)
    assert (m.precision, m.recall, m.f1) == (0.75, 0.75, 0.75)
    perfect = evaluate([True, False], [ABNORMAL, NORMAL])
    assert (perfect.precision, perfect.recall, perfect.f1) == (1.0, 1.0, 1.0)


def test_zero_predicted_positives_flagged():
    m = evaluate([False, False], [ABNORMAL, NORMAL])
    assert m.precision == 0.0 and "precision" in m.undefined and m.fn == 1


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 1000), st.integers(0, 1000), st.integers(0, 1000), st.integers(0, 1000))
def test_metrics_match_formulas(tp, fp, tn, fn):
    m = Metrics.from_counts(tp, fp, tn, fn)
    assert (m.precision, m.recall, m.f1) == confusion_metrics(tp, fp, fn)


def test_evaluate_counts_and_verdict_objects():
    v = [DetectionVerdict(("x", 0, i), a, 0 if a else None) for i, a in enumerate([True, True, False, False])]
    m = evaluate(v, [ABNORMAL, NORMAL, ABNORMAL, NORMAL])
    assert (m.tp, m.fp, m.fn, m.tn) == (1, 1, 1, 1)


def test_evaluate_length_mismatch():
    with pytest.raises(ValueError):
        evaluate([True], [0, 1])


# -- streaming -------------------------------------------------------------------

def test_offline_makes_no_updates(tiny_stream):
    train, test, det, cfg = tiny_stream
    rep = run_stream(train, test, with_mode(cfg, Mode.OFFLINE), det)
    assert rep.update_steps == 0 and rep.online_batches == 0
    assert all(b.route == "Offline" and b.mmd is None for b in rep.batches)
    assert len(rep.verdicts) == len(test)


def test_run_stream_does_not_mutate_detector(tiny_stream):
    train, test, det, cfg = tiny_stream
    before = det.model.store.snapshot()
    run_stream(train, test, with_mode(cfg, Mode.META), det)
    assert all(np.array_equal(det.model.store[k], before[k]) for k in before)


def test_online_updates_every_batch_and_dsd_only_on_online_routes(tiny_stream):
    train, test, det, cfg = tiny_stream
    online = run_stream(train, test, with_mode(cfg, Mode.ONLINE), det)
    assert online.online_batches == len(online.batches)
    dsd = run_stream(train, test, with_mode(cfg, Mode.ONLINE_DSD, epsilon_multiplier=50.0), det)
    assert all((b.update_steps == 0) for b in dsd.batches if b.route == "Offline")
    assert 0 < dsd.online_batches < len(dsd.batches)


def test_zero_epsilon_reduces_omlog_to_meta(tiny_stream):
    train, test, det, cfg = tiny_stream
    meta = run_stream(train, test, with_mode(cfg, Mode.META), det)
    om = run_stream(train, test, with_mode(cfg, Mode.OMLOG, epsilon=0.0), det)
    assert om.online_batches == len(om.batches)
    assert verdicts_of(om) == verdicts_of(meta)
    assert om.update_steps == meta.update_steps


@pytest.fixture(scope="module")
def single_regime():
    spec = single_regime_spec(seed=5, duration=300, anomaly_rate=0.1, sample_length=20)
    st_ = synthesize(dataclasses.replace(spec, anomaly_types=("forbidden",)))
    train, test = split_train_test(st_.samples, 0.5)
    train = train[: len(train) // 50 * 50]
    cfg = tiny_stream_config()
    return train, test, fit_detector(train, cfg), cfg


def test_infinite_epsilon_without_new_events_reduces_to_offline(single_regime):
    train, test, det, cfg = single_regime
    assert max(max(s.events) for s in test) < det.model.vocab_size
    off = run_stream(train, test, with_mode(cfg, Mode.OFFLINE), det)
    om = run_stream(train, test, with_mode(cfg, Mode.OMLOG, epsilon=float("inf")), det)
    assert om.online_batches == 0 and om.update_steps == 0
    assert verdicts_of(om) == verdicts_of(off)
    om2 = run_stream(train, test, with_mode(cfg, Mode.OMLOG, epsilon_multiplier=float("inf")), det)
    assert verdicts_of(om2) == verdicts_of(off)


def test_stream_equal_to_last_training_batch_never_routes_online(single_regime):
    train, _, det, cfg = single_regime
    last = batches_of(train, cfg.batch_size)[-1]
    rep = run_stream(train, last * 3, with_mode(cfg, Mode.OMLOG), det)
    assert rep.online_batches == 0
    assert all(b.mmd == 0.0 for b in rep.batches)


def test_partial_final_batch_processed(tiny_stream):
    train, test, det, cfg = tiny_stream
    rep = run_stream(train, test[:73], with_mode(cfg, Mode.OMLOG), det)
    assert [b.size for b in rep.batches] == [50, 23]


def test_empty_test_errors(tiny_stream):
    train, _, det, cfg = tiny_stream
    with pytest.raises(ValueError):
        run_stream(train, [], cfg, det)


def test_stream_is_deterministic(tiny_stream):
    train, test, det, cfg = tiny_stream
    a = run_stream(train, test, cfg, det).to_dict(timings=False)
    b = run_stream(train, test, cfg, det).to_dict(timings=False)
    assert json.dumps(a, sort_keys=True, default=str) == json.dumps(b, sort_keys=True, default=str)


def test_detector_save_load_roundtrip(tiny_stream, tmp_path):
    train, test, det, cfg = tiny_stream
    det.save(tmp_path / "ck")
    back = Detector.load(tmp_path / "ck")
    assert back.mmd == det.mmd and back.encoder == det.encoder
    assert np.array_equal(back.reference, det.reference)
    a = run_stream(train, test, cfg, det).to_dict(timings=False)
    b = run_stream(train, test, cfg, back).to_dict(timings=False)
    assert a == b


def test_missing_checkpoint_error(tmp_path):
    with pytest.raises(FileNotFoundError, match="missing checkpoint"):
        Detector.load(tmp_path)


def test_report_files(tiny_stream, tmp_path):
    train, test, det, cfg = tiny_stream
    rep = run_stream(train, test, cfg, det)
    rep.write(tmp_path)
    doc = json.loads((tmp_path / "report.json").read_text())
    assert doc["mode"] == "omlog" and doc["metrics"]["f1"] == rep.metrics.f1
    rows = (tmp_path / "batches.csv").read_text().splitlines()
    assert len(rows) == len(rep.batches) + 1
    assert len((tmp_path / "verdicts.csv").read_text().splitlines()) == len(test) + 1
    assert (tmp_path / "meta.csv").exists()


def test_stream_config_roundtrip():
    cfg = tiny_stream_config(Mode.ONLINE_DSD)
    assert StreamConfig.from_dict(cfg.to_dict()) == cfg


# -- sweep -----------------------------------------------------------------------

def test_sweep_single_point_matches_run(tiny_stream):
    train, test, det, cfg = tiny_stream
    rows, reps = sweep(train, test, cfg, [1.0], [cfg.episode.tasks_per_batch], det)
    single = run_stream(train, test, cfg, det)
    assert len(rows) == 1
    assert reps[0].to_dict(timings=False) == single.to_dict(timings=False)


def test_sweep_epsilon_monotone_and_tasks_distinct(tiny_stream):
    train, test, det, cfg = tiny_stream
    rows, reps = sweep(train, test, cfg, [0.0, 1.0, 10.0, 1000.0, float("inf")], [2, 10], det)
    assert len(reps) == 10
    for T in (2, 10):
        counts = [r["online_batches"] for r in rows if r["tasks"] == T]
        assert counts == sorted(counts, reverse=True)
    by_t = {r["tasks"]: r["update_steps"] for r in rows if r["epsilon_multiplier"] == 1.0}
    assert by_t[2] != by_t[10]
