"""
Shared fixtures: small synthetic volumes and a phantom cohort on disk
"""
import os
import sys

import numpy as np
import pytest

# Add project root to Python path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from normsynth.models.volume import Contrast, Mask, Volume
from normsynth.services.phantom import PhantomSpec, generate_cohort, write_cohort


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def three_class_volume(rng):
    """20^3 volume of three intensity slabs (100/200/300) with mild noise, full mask"""
    data = np.empty((20, 20, 20))
    data[:, :, :7] = 100.0
    data[:, :, 7:14] = 200.0
    data[:, :, 14:] = 300.0
    labels = np.zeros(data.shape, dtype=int)
    labels[:, :, 7:14] = 1
    labels[:, :, 14:] = 2
    data = data + rng.normal(0.0, 5.0, size=data.shape)
    return Volume(data, contrast=Contrast.T1), Mask.full(data.shape), labels


@pytest.fixture
def gaussian_volume(rng):
    """20^3 volume of N(1000, 100) intensities, full mask"""
    data = rng.normal(1000.0, 100.0, size=(20, 20, 20))
    return Volume(data, contrast=Contrast.T1), Mask.full(data.shape)


@pytest.fixture(scope='session')
def small_spec():
    return PhantomSpec(n_subjects=6, dims=(32, 32, 32), seed=7)


@pytest.fixture(scope='session')
def small_cohort(small_spec):
    return generate_cohort(small_spec)


@pytest.fixture(scope='session')
def cohort_manifest(tmp_path_factory, small_spec, small_cohort):
    """Small cohort written to disk (3 train / 3 test); returns the manifest path"""
    out = tmp_path_factory.mktemp('cohort')
    return write_cohort(small_cohort, str(out), spec=small_spec)
