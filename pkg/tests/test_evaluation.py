import math

import pytest

from core import AnomalyEvent, BBox, Branch, IngestError, TimeStamp
from evaluation import (EvaluationParams, MatchResult, f1, format_report, load_predictions, match_events, nrmse,
                        nrmse_from_rmse, predictions_by_video, rmse, s4, score, write_predictions)


def _event(video_id, seconds, confidence=0.8):
    return AnomalyEvent(video_id, TimeStamp(seconds), BBox(0, 0, 10, 10), confidence, Branch.FUSED)


def test_match_examples():
    exact = match_events({'1': [100.0]}, {'1': [100.0]})
    assert (exact.tp, exact.fp, exact.fn) == (1, 0, 0)

    late = match_events({'1': [115.0]}, {'1': [100.0]})
    assert (late.tp, late.fp, late.fn) == (0, 1, 1)

    two = match_events({'1': [106.0, 102.0]}, {'1': [100.0]})
    assert (two.tp, two.fp, two.fn) == (1, 1, 0)
    assert two.pairs == [('1', 102.0, 100.0)]


def test_match_is_per_video():
    match = match_events({'1': [100.0], '2': [50.0]}, {'1': [50.0], '3': [10.0]})
    assert (match.tp, match.fp, match.fn) == (0, 2, 2)


def test_match_ignores_prediction_order(rng):
    for _ in range(200):
        preds = [float(x) for x in rng.uniform(0, 200, size=int(rng.integers(0, 6)))]
        truths = [float(x) for x in rng.uniform(0, 200, size=int(rng.integers(0, 4)))]
        a = match_events({'v': preds}, {'v': truths})
        b = match_events({'v': preds[::-1]}, {'v': truths})
        assert (a.tp, a.fp, a.fn) == (b.tp, b.fp, b.fn)
        assert sorted(a.errors) == pytest.approx(sorted(b.errors))


def test_f1_examples():
    assert f1(MatchResult(tp=10)) == 1.0
    assert f1(MatchResult(tp=0, fp=3, fn=2)) == 0.0
    assert f1(MatchResult(tp=8, fp=2, fn=1)) == pytest.approx(2 * 0.8 * (8 / 9) / (0.8 + 8 / 9))
    assert f1(MatchResult(tp=8, fp=2, fn=1)) == pytest.approx(0.8421, abs=1e-4)
    with pytest.raises(ValueError):
        f1(MatchResult())


def test_nrmse_examples():
    assert nrmse(match_events({'1': [10.0, 90.0]}, {'1': [10.0, 90.0]})) == 0.0
    assert nrmse(MatchResult(tp=1, pairs=[('1', 400.0, 100.0)])) == 1.0
    assert nrmse(MatchResult(fp=1, fn=1)) == 1.0
    assert rmse(MatchResult(fp=1)) is None
    assert nrmse_from_rmse(3.4039) == pytest.approx(0.011346, abs=1e-6)


def test_s4_examples():
    assert s4(0.9302, nrmse_from_rmse(3.4039)) == pytest.approx(0.9196, abs=5e-5)
    assert s4(1.0, 0.0) == 1.0
    assert s4(0.0, 0.4) == 0.0


def test_nrmse_never_decreases_with_larger_errors(rng):
    for _ in range(200):
        errors = rng.uniform(0, 400, size=int(rng.integers(1, 6)))
        pairs = [('v', 100.0 + e, 100.0) for e in errors]
        base = nrmse(MatchResult(tp=len(pairs), pairs=pairs))
        i = int(rng.integers(0, len(pairs)))
        worse = list(pairs)
        worse[i] = ('v', pairs[i][1] + float(rng.uniform(0, 50)), 100.0)
        assert nrmse(MatchResult(tp=len(worse), pairs=worse)) >= base


def test_score_bounds(rng):
    for _ in range(100):
        preds = {'v': [float(x) for x in rng.uniform(0, 100, size=3)]}
        truth = {'v': [float(x) for x in rng.uniform(0, 100, size=2)]}
        scores, _ = score(preds, truth, EvaluationParams(match_window_s=20.0))
        assert scores.s4 <= scores.f1
        assert 0.0 <= scores.nrmse <= 1.0


def test_score_without_matches():
    scores, match = score({'1': [500.0]}, {'1': [10.0]})
    assert match.tp == 0
    assert scores.f1 == 0.0 and scores.s4 == 0.0
    assert math.isnan(scores.rmse)


def test_predictions_file_round_trip(tmp_path):
    events = [_event('b', 12.5, 0.7), _event('a', 100.0, 0.9), _event('a', 40.25)]
    path = write_predictions(events, tmp_path / 'predictions.txt')
    assert path.read_text().splitlines() == ['a 40.250 0.8000', 'a 100.000 0.9000', 'b 12.500 0.7000']
    loaded = load_predictions(path)
    assert loaded == {'a': [(40.25, 0.8), (100.0, 0.9)], 'b': [(12.5, 0.7)]}
    assert predictions_by_video(events) == {'b': [12.5], 'a': [100.0, 40.25]}


def test_load_predictions_reports_bad_lines(tmp_path):
    path = tmp_path / 'bad.txt'
    path.write_text("# header\n1 10.0 0.5\n2 oops\n")
    with pytest.raises(IngestError, match=':3:'):
        load_predictions(path)


def test_report_lists_videos_and_totals():
    report = format_report({'1': [101.0], '2': [20.0]}, {'1': [100.0], '3': [5.0]})
    lines = report.splitlines()
    assert lines[0].split() == ['video', 'TP', 'FP', 'FN', 'mean', '|dt|', 's']
    assert lines[1].split() == ['1', '1', '0', '0', '1.00']
    assert lines[2].split() == ['2', '0', '1', '0', '-']
    assert lines[3].split() == ['3', '0', '0', '1', '-']
    assert lines[-1].startswith('F1 0.5000  RMSE 1.0000')
