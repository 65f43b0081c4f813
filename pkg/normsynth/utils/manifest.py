"""
Cohort manifest: subject -> contrast -> file path, plus the train/test split
"""
import json
import logging
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

from normsynth.models.errors import ContractError, SchemaError, VolumeIOError

# Setup logging
logger = logging.getLogger(__name__)

MANIFEST_FORMAT = 'normsynth-cohort'
MANIFEST_VERSION = 1


@dataclass(frozen=True)
class Manifest:
    """
    Parsed cohort manifest with absolute paths

    Attributes:
        path: Manifest file
        subjects: subject id -> entry ('T1', 'T2', 'FLAIR', 'brain', optional 'truth')
        train: Training subject ids, in manifest order
        test: Test subject ids, disjoint from train
    """
    path: str
    subjects: Dict[str, dict]
    train: Tuple[str, ...]
    test: Tuple[str, ...]

    @property
    def root(self) -> str:
        return os.path.dirname(os.path.abspath(self.path))

    @property
    def subject_ids(self) -> List[str]:
        return list(self.train) + list(self.test)

    def resolve(self, relative: str) -> str:
        return relative if os.path.isabs(relative) else os.path.join(self.root, relative)

    def volume_path(self, sid: str, contrast: str) -> str:
        entry = self.entry(sid)
        if contrast not in entry:
            raise ContractError(f"Subject {sid} has no {contrast} volume in {self.path}")
        return self.resolve(entry[contrast])

    def brain_path(self, sid: str) -> str:
        return self.volume_path(sid, 'brain')

    def truth_path(self, sid: str, tissue: str) -> Optional[str]:
        truth = self.entry(sid).get('truth') or {}
        return self.resolve(truth[tissue]) if tissue in truth else None

    def entry(self, sid: str) -> dict:
        try:
            return self.subjects[sid]
        except KeyError:
            raise ContractError(f"Unknown subject '{sid}' in {self.path}")

    def split_of(self, sid: str) -> str:
        return 'train' if sid in self.train else 'test'


def load_manifest(path) -> Manifest:
    """
    Read and validate a cohort manifest

    Raises:
        VolumeIOError: file missing
        SchemaError: wrong format/version or missing fields
        ContractError: overlapping or unknown split members
    """
    path = os.fspath(path)
    try:
        with open(path, 'r') as f:
            payload = json.load(f)
    except FileNotFoundError:
        raise VolumeIOError(f"Manifest not found: {path}")
    except (OSError, json.JSONDecodeError) as e:
        raise SchemaError(f"Could not parse manifest {path}: {e}")

    if not isinstance(payload, dict) or payload.get('format') != MANIFEST_FORMAT:
        raise SchemaError(f"{path} is not a cohort manifest")
    if payload.get('version') != MANIFEST_VERSION:
        raise SchemaError(f"{path} has manifest version {payload.get('version')}, expected {MANIFEST_VERSION}")

    subjects = payload.get('subjects')
    split = payload.get('split') or {}
    if not isinstance(subjects, dict) or not subjects:
        raise SchemaError(f"{path} lists no subjects")
    for sid, entry in subjects.items():
        if not isinstance(entry, dict) or 'brain' not in entry:
            raise SchemaError(f"Subject {sid} in {path} has no brain mask")

    train = tuple(split.get('train', ()))
    test = tuple(split.get('test', ()))
    overlap = set(train) & set(test)
    if overlap:
        raise ContractError(f"Train and test sets overlap: {sorted(overlap)}")
    unknown = (set(train) | set(test)) - set(subjects)
    if unknown:
        raise ContractError(f"Split names unknown subjects: {sorted(unknown)}")
    if not train:
        raise ContractError(f"{path} has an empty training split")

    logger.debug(f"Loaded manifest {path}: {len(train)} train / {len(test)} test subjects")
    return Manifest(path=path, subjects=subjects, train=train, test=test)
