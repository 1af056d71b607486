import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import config as settings
from config import apply_overrides, load_config, write_config
from core import CrashTraceError
from evaluation import format_report, load_predictions
from ingest import extract_frames, load_ground_truth
from pipeline import build_road_mask, run_pipeline
from scenario import PRESETS, build_preset, crash_suite, generate_scenario, stall_suite

logger = logging.getLogger(__name__)

SUITES = {
    'stall-suite': stall_suite,
    'crash-suite': crash_suite,
}

# ----- Config Helpers -----


def parse_assignment(text):
    if '=' not in text:
        raise argparse.ArgumentTypeError(f"expected section.key=value, got {text!r}")
    key, value = text.split('=', 1)
    return key.strip(), value


def resolve_config(args):
    """Config file first, then dedicated flags, then --set overrides."""
    config = load_config(args.config)
    pairs = []
    manifests = getattr(args, 'manifest', None)
    if manifests:
        pairs.append(('paths.manifests', ','.join(manifests)))
    if getattr(args, 'ground_truth', None):
        pairs.append(('paths.ground_truth', args.ground_truth))
    if getattr(args, 'output', None):
        pairs.append(('paths.output_dir', args.output))
    if getattr(args, 'no_dynamic', False):
        pairs.append(('pipeline.dynamic_stage', 'false'))
    pairs.extend(getattr(args, 'set', None) or [])
    return apply_overrides(config, pairs)


# ----- Subcommands -----


def cmd_run(args):
    config = resolve_config(args)
    if args.dump_config:
        path = write_config(config, args.dump_config)
        logger.info(f"✅ Effective config written to {path}")
    summary = run_pipeline(config)
    for event in summary.events:
        print(f"{event.video_id} {event.start_seconds:.3f} {event.confidence:.4f} {event.branch.value}")
    if summary.report:
        print()
        print(summary.report)
    return 0


def cmd_score(args):
    config = resolve_config(args)
    predictions = load_predictions(args.predictions)
    truth = load_ground_truth(args.ground_truth)
    print(format_report(predictions, truth, config.evaluation))
    return 0


def cmd_synth(args):
    output = Path(args.output)
    if args.preset in SUITES:
        scenarios = SUITES[args.preset](n=args.count) if args.count else SUITES[args.preset]()
    else:
        kwargs = {}
        if args.video_id:
            kwargs['video_id'] = args.video_id
        if args.seed is not None:
            kwargs['seed'] = args.seed
        scenarios = [build_preset(args.preset, **kwargs)]
    for scenario in scenarios:
        files = generate_scenario(scenario, output)
        print(files.manifest_path)
    return 0


def cmd_mask(args):
    config = resolve_config(args)
    output = Path(config.paths.output_dir)
    for manifest_path in config.paths.manifests:
        manifest, mask = build_road_mask(manifest_path, config)
        path = mask.write_pgm(output / manifest.video_id / 'road_mask.pgm')
        print(f"{manifest.video_id} {mask.area} {path}")
    return 0


def cmd_overlay(args):
    config = resolve_config(args)
    params = dataclasses.replace(config.pipeline, overlays=True, plots=True, overlay_stride=args.stride)
    summary = run_pipeline(dataclasses.replace(config, pipeline=params))
    for video_id in sorted(summary.results):
        print(Path(config.paths.output_dir) / video_id / 'overlays')
    return 0


def cmd_extract(args):
    ok, message = extract_frames(args.video, args.output, fps=args.fps, video_id=args.video_id)
    print(message)
    return 0 if ok else 1


# ----- Entry Point -----


def build_parser():
    parser = argparse.ArgumentParser(prog='crashtrace',
                                     description='Stalled and crashed vehicle detection in fixed-camera video')
    sub = parser.add_subparsers(dest='command', required=True)

    def with_config(p):
        p.add_argument('--config', help='config file of section.key = value lines')
        p.add_argument('--set', action='append', type=parse_assignment, metavar='SECTION.KEY=VALUE',
                       help='override one config value (repeatable)')
        return p

    run = with_config(sub.add_parser('run', help='run the full pipeline'))
    run.add_argument('--manifest', action='append', help='video manifest (repeatable)')
    run.add_argument('--ground-truth', help='ground truth file to score against')
    run.add_argument('--output', help='output directory')
    run.add_argument('--no-dynamic', action='store_true', help='skip the dynamic stage (ablation)')
    run.add_argument('--dump-config', help='write the effective config to this file')
    run.set_defaults(func=cmd_run)

    score = with_config(sub.add_parser('score', help='score a predictions file'))
    score.add_argument('--predictions', required=True)
    score.add_argument('--ground-truth', required=True)
    score.set_defaults(func=cmd_score)

    synth = sub.add_parser('synth', help='render a synthetic scenario')
    synth.add_argument('preset', choices=sorted(PRESETS) + sorted(SUITES))
    synth.add_argument('--output', default='synthetic')
    synth.add_argument('--video-id')
    synth.add_argument('--seed', type=int)
    synth.add_argument('--count', type=int, help='number of scenarios for a suite')
    synth.set_defaults(func=cmd_synth)

    mask = with_config(sub.add_parser('mask', help='build and write the road mask only'))
    mask.add_argument('--manifest', action='append')
    mask.add_argument('--output')
    mask.set_defaults(func=cmd_mask)

    overlay = with_config(sub.add_parser('overlay', help='run the pipeline and draw overlays'))
    overlay.add_argument('--manifest', action='append')
    overlay.add_argument('--output')
    overlay.add_argument('--stride', type=int, default=10)
    overlay.set_defaults(func=cmd_overlay)

    extract = sub.add_parser('extract', help='convert an encoded video to a frame sequence (ffmpeg)')
    extract.add_argument('video')
    extract.add_argument('--output', required=True)
    extract.add_argument('--fps', type=float, default=30.0)
    extract.add_argument('--video-id')
    extract.set_defaults(func=cmd_extract)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=settings.LOG_LEVEL, format='%(asctime)s - %(levelname)s - %(message)s')
    try:
        return args.func(args)
    except CrashTraceError as e:
        logger.error(f"❌ {e}")
        return 1


if __name__ == '__main__':
    sys.exit(main())
