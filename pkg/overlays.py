import logging
from pathlib import Path

import cv2
import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from core import bbox_center
from ingest import as_gray_array

logger = logging.getLogger(__name__)

TRAIL_LEN = 30
EVENT_COLOR = (0, 0, 255)
TRAIL_COLOR = (0, 200, 0)


def _point(xy):
    return int(round(xy[0])), int(round(xy[1]))


def draw_frame(frame, frame_idx, events, tracks, fps):
    """BGR copy of the frame with track trails and the events active at frame_idx."""
    canvas = cv2.cvtColor(as_gray_array(frame), cv2.COLOR_GRAY2BGR)
    for track in tracks:
        trail = [bbox_center(p.bbox) for p in track.history
                 if frame_idx - TRAIL_LEN < p.frame_idx <= frame_idx]
        if len(trail) >= 2:
            pts = np.array([_point(c) for c in trail], dtype=np.int32).reshape(-1, 1, 2)
            cv2.polylines(canvas, [pts], False, TRAIL_COLOR, 1)
    for event in events:
        if frame_idx < event.start_time.to_frame(fps):
            continue
        b = event.bbox
        cv2.rectangle(canvas, _point((b.x1, b.y1)), _point((b.x2, b.y2)), EVENT_COLOR, 2)
        label = f"{event.branch.value} {event.confidence:.2f}"
        cv2.putText(canvas, label, _point((b.x1, max(10, b.y1 - 4))), cv2.FONT_HERSHEY_SIMPLEX,
                    0.35, EVENT_COLOR, 1, cv2.LINE_AA)
    return canvas


def emit_overlays(frames, events, tracks, output_folder, fps, stride=1, series_by_event=None):
    """Write annotated frames and, for flow-refined events, the velocity plot next to them."""
    output_folder = Path(output_folder)
    output_folder.mkdir(parents=True, exist_ok=True)
    written = 0
    for idx in range(0, len(frames), stride):
        canvas = draw_frame(frames[idx], idx, events, tracks, fps)
        cv2.imwrite(str(output_folder / f"{idx:06d}.png"), canvas)
        written += 1
    for i, (event, series) in enumerate((series_by_event or {}).items()):
        if event.branch.value == 'flow-refined' and len(series):
            plot_velocity_series(series, output_folder / f"velocity_{i:02d}.png", fps,
                                 marker_frame=event.start_time.to_frame(fps))
    logger.info(f"🖼️ Wrote {written} overlay frames to {output_folder}")
    return written


def _figure():
    # no pyplot: its global figure registry is shared by the worker threads
    fig = Figure(figsize=(8, 3))
    FigureCanvasAgg(fig)
    return fig, fig.subplots()


def plot_velocity_series(series, path, fps, marker_frame=None):
    frames = np.asarray(series.frame_indices)
    fig, ax = _figure()
    ax.plot(frames / fps, series.magnitudes, lw=1.0, label='|mean flow|')
    if marker_frame is not None:
        ax.axvline(marker_frame / fps, color='r', ls='--', lw=1.0, label='crash')
    ax.set_xlabel('time (s)')
    ax.set_ylabel('px / frame')
    ax.legend(loc='upper right')
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    return Path(path)


def plot_curve_counts(analysis, path):
    starts = [analysis.window_start + i * analysis.interval_s for i in range(len(analysis.n_series))]
    fig, ax = _figure()
    ax.bar(starts, analysis.n_series, width=0.8 * analysis.interval_s, align='edge')
    if analysis.crash_interval is not None:
        ax.axvline(starts[analysis.crash_interval], color='r', ls='--', lw=1.0)
    ax.set_xlabel('interval start (s)')
    ax.set_ylabel('abnormal curves')
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    return Path(path)
