# Small helpers: seed derivation, cohort manifests, console status
from .seeding import derive_seed, stage_rng
from .manifest import Manifest, load_manifest
from .console import clean_log
