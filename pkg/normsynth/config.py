"""
normsynth configuration - environment-driven defaults and config-file loading
"""
import os
import json
import logging

from dotenv import load_dotenv

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

# Pick up a .env in the working directory before any constant is read
load_dotenv()

# Setup logging
logger = logging.getLogger(__name__)

# Base directory is parent of the normsynth package
BASE_DIR = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

# Operational settings
SEED = int(os.environ.get('NORMSYNTH_SEED', 0))
JOBS = int(os.environ.get('NORMSYNTH_JOBS', 1))
LOG_LEVEL = os.environ.get('NORMSYNTH_LOG_LEVEL', 'INFO').upper()
LOG_FILE = os.environ.get('NORMSYNTH_LOG_FILE', None)
OUT_DIR = os.environ.get('NORMSYNTH_OUT_DIR', os.path.join(BASE_DIR, 'output'))
PATCH_SAMPLES = int(os.environ.get('NORMSYNTH_SAMPLES', 100_000))
BOOTSTRAP_RESAMPLES = int(os.environ.get('NORMSYNTH_BOOTSTRAP', 10_000))

# Normalization constants
SCALE_CONSTANT = 1000.0
STRIPE_TAU = 0.05
STRIPE_CLAMP_EPS = 1e-4
STRIPE_MIN_VOXELS = 100
HM_LABELS = (1, 10, 20, 30, 40, 50, 60, 70, 80, 90, 99)
HM_SCALE = (1.0, 100.0)
RAVEL_RANK = 1
MODEL_SCHEMA_VERSION = 1

# Density estimation
KDE_GRID_SIZE = 512
KDE_MIN_SAMPLES = 50
PEAK_PROMINENCE = 0.05

# Tissue models
FCM_FUZZINESS = 2.0
FCM_TOL = 1e-5
FCM_MAX_ITER = 100
FCM_MIN_VOXELS = 1000
GMM_TOL = 1e-7
GMM_MAX_ITER = 500

# Synthesis
POLY_DEGREE = 3
POLY_RIDGE = 1e-8
RF_TREES = 60
RF_MIN_LEAF = 5
REGRESSION_FORMAT_VERSION = 1

# Quality metrics
MSSIM_WINDOW = 11
MSSIM_SIGMA = 1.5
MSSIM_K1 = 0.01
MSSIM_K2 = 0.03
MI_BINS = 32
WILCOXON_EXACT_MAX_N = 25
SIGNIFICANCE_ALPHA = 0.05

# Contrast pairs synthesized by default (source, target)
DEFAULT_CONTRAST_PAIRS = (('T1', 'FLAIR'), ('T1', 'T2'))

# Keys accepted in a --config file; they mirror the CLI flags
CONFIG_KEYS = {
    'manifest', 'out', 'method', 'contrast_pair', 'seed', 'wm_from', 'jobs',
    'synth', 'samples', 'trees', 'min_leaf', 'no_center', 'per_feature_poly',
    'mssim_2d', 'bins', 'bootstrap', 'log_level', 'log_file',
    'subjects', 'dims', 'outlier',
}


def configure_logging(level=None, log_file=None):
    """
    Configure process-wide logging for the batch tools

    Args:
        level: Logging level name (defaults to NORMSYNTH_LOG_LEVEL)
        log_file: Optional file that receives a copy of every record

    Returns:
        The root logger
    """
    handlers = [logging.StreamHandler()]
    log_file = log_file or LOG_FILE
    if log_file:
        handlers.append(logging.FileHandler(log_file))

    logging.basicConfig(
        level=getattr(logging, (level or LOG_LEVEL).upper(), logging.INFO),
        format=LOG_FORMAT,
        handlers=handlers,
        force=True
    )

    logger.debug(f"Logging configured with level={level or LOG_LEVEL}, log_file={log_file}")
    return logging.getLogger()


def load_config_file(path):
    """
    Load a TOML or JSON pipeline config whose keys mirror the CLI flags

    Args:
        path: Path to a .toml or .json file

    Returns:
        Dictionary of recognised settings with '-' normalized to '_'
    """
    with open(path, 'rb') as f:
        raw = f.read()

    if str(path).lower().endswith('.toml'):
        data = tomllib.loads(raw.decode('utf-8'))
    else:
        data = json.loads(raw.decode('utf-8'))

    if not isinstance(data, dict):
        raise ValueError(f"Config file {path} must hold a table/object at top level")

    settings = {}
    for key, value in data.items():
        name = key.replace('-', '_')
        if name not in CONFIG_KEYS:
            logger.warning(f"Ignoring unknown config key '{key}' in {path}")
            continue
        settings[name] = value

    logger.info(f"Loaded {len(settings)} settings from {path}")
    return settings
