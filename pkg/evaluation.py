import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

from core import IngestError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EvaluationParams:
    match_window_s: float = 10.0
    normalizer_s: float = 300.0


@dataclass
class MatchResult:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    pairs: list = field(default_factory=list)

    @property
    def errors(self):
        return [abs(pred - truth) for _, pred, truth in self.pairs]

    def __add__(self, other):
        return MatchResult(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn,
                           self.pairs + other.pairs)


@dataclass(frozen=True)
class Scores:
    f1: float
    rmse: float
    nrmse: float
    s4: float


def _start_times(entries):
    """Accept plain seconds, (seconds, confidence) pairs or AnomalyEvents."""
    times = []
    for e in entries:
        if hasattr(e, 'start_seconds'):
            times.append(e.start_seconds)
        elif isinstance(e, (tuple, list)):
            times.append(float(e[0]))
        else:
            times.append(float(e))
    return times


def match_events(predictions, ground_truth, match_window_s=10.0):
    """Greedy per-video matching by smallest time error (ties: earlier prediction)."""
    total = MatchResult()
    for video_id in sorted(set(predictions) | set(ground_truth)):
        preds = _start_times(predictions.get(video_id, ()))
        truths = _start_times(ground_truth.get(video_id, ()))
        candidates = sorted(
            (abs(p - t), p, i, j)
            for i, p in enumerate(preds)
            for j, t in enumerate(truths)
            if abs(p - t) <= match_window_s
        )
        used_p, used_t = set(), set()
        result = MatchResult()
        for _, _, i, j in candidates:
            if i in used_p or j in used_t:
                continue
            used_p.add(i)
            used_t.add(j)
            result.pairs.append((video_id, preds[i], truths[j]))
        result.tp = len(result.pairs)
        result.fp = len(preds) - result.tp
        result.fn = len(truths) - result.tp
        total = total + result
    return total


def f1(match):
    if match.tp + match.fp + match.fn == 0:
        raise ValueError("Cannot compute F1 on an empty evaluation set")
    if match.tp == 0:
        return 0.0
    precision = match.tp / (match.tp + match.fp)
    recall = match.tp / (match.tp + match.fn)
    return 2 * precision * recall / (precision + recall)


def rmse(match):
    if match.tp == 0:
        return None
    return math.sqrt(sum(e * e for e in match.errors) / match.tp)


def nrmse(match, normalizer_s=300.0):
    value = rmse(match)
    if value is None:
        return 1.0
    return min(value, normalizer_s) / normalizer_s


def nrmse_from_rmse(value, normalizer_s=300.0):
    return min(value, normalizer_s) / normalizer_s


def s4(f1_value, nrmse_value):
    return f1_value * (1.0 - nrmse_value)


def score(predictions, ground_truth, params=None):
    params = params or EvaluationParams()
    match = match_events(predictions, ground_truth, params.match_window_s)
    f = f1(match)
    n = nrmse(match, params.normalizer_s)
    r = rmse(match)
    return Scores(f, float('nan') if r is None else r, n, s4(f, n)), match


def per_video_scores(predictions, ground_truth, params=None):
    params = params or EvaluationParams()
    rows = {}
    for video_id in sorted(set(predictions) | set(ground_truth)):
        match = match_events({video_id: predictions.get(video_id, ())},
                             {video_id: ground_truth.get(video_id, ())}, params.match_window_s)
        rows[video_id] = match
    return rows


def format_report(predictions, ground_truth, params=None):
    """Plain-text table: one row per video plus the aggregate scores."""
    params = params or EvaluationParams()
    lines = [f"{'video':<20}{'TP':>4}{'FP':>4}{'FN':>4}{'mean |dt| s':>13}"]
    for video_id, match in per_video_scores(predictions, ground_truth, params).items():
        errs = match.errors
        mean_err = f"{sum(errs) / len(errs):.2f}" if errs else "-"
        lines.append(f"{video_id:<20}{match.tp:>4}{match.fp:>4}{match.fn:>4}{mean_err:>13}")
    totals, match = score(predictions, ground_truth, params)
    rmse_text = "-" if match.tp == 0 else f"{totals.rmse:.4f}"
    lines.append("")
    lines.append(f"F1 {totals.f1:.4f}  RMSE {rmse_text}  NRMSE {totals.nrmse:.6f}  S4 {totals.s4:.4f}")
    return "\n".join(lines)


def load_predictions(path):
    """Lines `video_id start_seconds confidence`, grouped per video."""
    predictions = {}
    with open(path, 'r', encoding='utf-8') as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith('#'):
                continue
            parts = line.split()
            if len(parts) != 3:
                raise IngestError(f"{path}:{lineno}: expected 'video_id start confidence'")
            try:
                entry = (float(parts[1]), float(parts[2]))
            except ValueError as e:
                raise IngestError(f"{path}:{lineno}: {e}") from e
            predictions.setdefault(parts[0], []).append(entry)
    return predictions


def write_predictions(events, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ordered = sorted(events, key=lambda e: (e.video_id, e.start_seconds))
    with open(path, 'w', encoding='utf-8') as f:
        for e in ordered:
            f.write(f"{e.video_id} {e.start_seconds:.3f} {e.confidence:.4f}\n")
    return path


def predictions_by_video(events):
    grouped = {}
    for e in events:
        grouped.setdefault(e.video_id, []).append(e.start_seconds)
    return grouped
