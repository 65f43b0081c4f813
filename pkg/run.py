#!/usr/bin/env python3
"""
normsynth batch command line
Normalize MR intensities, synthesize contrasts, evaluate and report
"""
import os
import sys
import json
import logging
import argparse

# Add current directory to Python path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

# Import modules
from normsynth.config import (
    DEFAULT_CONTRAST_PAIRS,
    OUT_DIR,
    configure_logging,
    load_config_file,
)
from normsynth.models.errors import ContractError, NormSynthError, VolumeIOError
from normsynth.services import pipeline
from normsynth.utils.console import clean_log

logger = logging.getLogger(__name__)

COMMANDS = ('phantom', 'fit', 'apply', 'synth', 'evaluate', 'report', 'all')


def _split_list(values):
    """Flatten repeated and comma-separated flag values"""
    if values is None:
        return None
    if isinstance(values, str):
        values = [values]
    items = []
    for value in values:
        if isinstance(value, (list, tuple)) and len(value) == 2 and not any(',' in str(v) for v in value):
            items.append(tuple(value))
            continue
        items.extend(part.strip() for part in str(value).split(',') if part.strip())
    return items


def build_parser():
    parser = argparse.ArgumentParser(description='normsynth - MR intensity normalization and contrast synthesis')
    parser.add_argument('command', choices=COMMANDS, help='Pipeline stage to run')
    parser.add_argument('--config', help='TOML or JSON file whose keys mirror these flags')
    parser.add_argument('--manifest', help='Cohort manifest JSON')
    parser.add_argument('--out', help=f'Output directory (default: {OUT_DIR})')
    parser.add_argument('--method', action='append', help='Normalization method(s), comma-separated or repeated')
    parser.add_argument('--contrast-pair', action='append', help='Source:target contrasts, e.g. T1:FLAIR')
    parser.add_argument('--synth', action='append', help='Regressor(s): poly, rf')
    parser.add_argument('--seed', type=int, help='Base seed of every stochastic step')
    parser.add_argument('--jobs', type=int, help='Worker threads')
    parser.add_argument('--wm-from', choices=['t1', 'self'], help='WM source for FCM/GMM/KDE')
    parser.add_argument('--samples', type=int, help='Patch samples per training image')
    parser.add_argument('--trees', type=int, help='Random forest size')
    parser.add_argument('--min-leaf', type=int, help='Minimum samples per forest leaf')
    parser.add_argument('--no-center', action='store_true', default=None, help='RAVEL without centering')
    parser.add_argument('--per-feature-poly', action='store_true', default=None,
                        help='Polynomial with per-feature powers only')
    parser.add_argument('--mssim-2d', action='store_true', default=None, help='In-plane SSIM windows')
    parser.add_argument('--bins', type=int, help='Mutual information bins per image')
    parser.add_argument('--bootstrap', type=int, help='Bootstrap resamples for confidence intervals')
    parser.add_argument('--subjects', type=int, help='Phantom cohort size (default: 18)')
    parser.add_argument('--dims', type=int, nargs=3, help='Phantom volume shape (default: 64 64 64)')
    parser.add_argument('--outlier', action='store_true', default=None, help='Phantom with a histogram outlier')
    parser.add_argument('--log-level', help='Logging level (default: NORMSYNTH_LOG_LEVEL or INFO)')
    parser.add_argument('--log-file', help='Also write log records to this file')
    return parser


def resolve_settings(args):
    """CLI flags override config-file values, which override defaults"""
    settings = load_config_file(args.config) if args.config else {}
    for name, value in vars(args).items():
        if name in ('command', 'config') or value is None:
            continue
        settings[name] = value
    return settings


def build_pipeline_config(settings):
    if not settings.get('manifest'):
        raise ContractError("--manifest is required for this command")
    kwargs = {'manifest': settings['manifest'], 'out': settings.get('out') or OUT_DIR}
    if settings.get('method'):
        kwargs['methods'] = tuple(_split_list(settings['method']))
    kwargs['contrast_pairs'] = tuple(_split_list(settings.get('contrast_pair')) or DEFAULT_CONTRAST_PAIRS)
    if settings.get('synth'):
        kwargs['synth'] = tuple(_split_list(settings['synth']))
    for name in ('seed', 'jobs', 'wm_from', 'samples', 'trees', 'min_leaf', 'bins', 'bootstrap'):
        if settings.get(name) is not None:
            kwargs[name] = settings[name]
    kwargs['center'] = not settings.get('no_center', False)
    kwargs['per_feature_poly'] = bool(settings.get('per_feature_poly', False))
    kwargs['mssim_2d'] = bool(settings.get('mssim_2d', False))
    return pipeline.PipelineConfig(**kwargs)


def run_command(command, settings):
    if command == 'phantom':
        kwargs = {'out': settings.get('out') or OUT_DIR}
        for name, target in (('subjects', 'n_subjects'), ('dims', 'dims'), ('seed', 'seed'),
                             ('outlier', 'outlier'), ('jobs', 'jobs')):
            if settings.get(name) is not None:
                kwargs[target] = settings[name]
        return pipeline.cmd_phantom(**kwargs)

    config = build_pipeline_config(settings)
    handlers = {
        'fit': pipeline.cmd_fit,
        'apply': pipeline.cmd_apply,
        'synth': pipeline.cmd_synth,
        'evaluate': pipeline.cmd_evaluate,
        'report': pipeline.cmd_report,
        'all': pipeline.cmd_all,
    }
    return handlers[command](config)


def main(argv=None):
    """Main entry point; returns the process exit code"""
    parser = build_parser()
    args = parser.parse_args(argv)

    try:
        settings = resolve_settings(args)
        configure_logging(settings.get('log_level'), settings.get('log_file'))
        clean_log.info(f"normsynth {args.command}")
        run_command(args.command, settings)
    except NormSynthError as e:
        logger.error(f"{args.command} failed: {e}")
        print(json.dumps(e.to_response()), file=sys.stderr)
        return e.exit_code
    except (OSError, ValueError) as e:
        # config files and flags parsed outside the library
        error = ContractError(str(e)) if isinstance(e, ValueError) else VolumeIOError(str(e))
        print(json.dumps(error.to_response()), file=sys.stderr)
        return error.exit_code
    except Exception as e:
        logger.exception(f"Unexpected failure in {args.command}")
        print(json.dumps(NormSynthError(f"unexpected: {e}").to_response()), file=sys.stderr)
        return 1

    clean_log.success(f"{args.command} complete")
    return 0


if __name__ == '__main__':
    sys.exit(main())
