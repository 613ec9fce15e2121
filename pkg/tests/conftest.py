"""Shared fixtures: synthetic datasets and trained models, built once."""

import numpy as np
import pytest

from sslface import dataio, pipeline

# Small operating point for desk-scale fits: thresholds at the published
# defaults keep far too many nodes on 32x32 synthetic data to be fast in
# every test, so unit-level fixtures raise them slightly.
FAST_SETTINGS = pipeline.TrainSettings(ec_y=0.002, ef_y=0.002, ec_crcb=0.002, ef_crcb=0.002)


@pytest.fixture(scope="session")
def synthetic_dataset(tmp_path_factory):
    """20-identity blob-face gallery with 2000 balanced pairs on disk."""
    root = tmp_path_factory.mktemp("synthetic")
    spec = dataio.SyntheticSpec(
        n_identities=20, images_per_identity=11, intra_class_noise=4.0, seed=11, n_pairs=2000
    )
    manifest = dataio.write_synthetic_dataset(spec, root)
    return manifest


@pytest.fixture(scope="session")
def synthetic_pairs(synthetic_dataset):
    return dataio.load_manifest_pairs(synthetic_dataset)


@pytest.fixture(scope="session")
def image_store():
    return dataio.ImageStore(capacity=512)


@pytest.fixture(scope="session")
def split_pairs(synthetic_pairs):
    n_train = int(len(synthetic_pairs) * 0.8)
    return synthetic_pairs[:n_train], synthetic_pairs[n_train:]


BUILD_TIMES: dict[str, float] = {}


@pytest.fixture(scope="session")
def trained_model(split_pairs, image_store):
    """Full verification ensemble trained on the synthetic training split."""
    import time

    train_pairs, _ = split_pairs
    started = time.perf_counter()
    model = pipeline.train_verification_model(train_pairs, image_store, FAST_SETTINGS)
    BUILD_TIMES["trained_model"] = time.perf_counter() - started
    return model


@pytest.fixture(scope="session")
def small_manifest(tmp_path_factory):
    """Tiny dataset for fast end-to-end paths (CLI, service)."""
    root = tmp_path_factory.mktemp("small-synthetic")
    spec = dataio.SyntheticSpec(
        n_identities=8, images_per_identity=5, intra_class_noise=3.0, seed=23, n_pairs=140
    )
    return dataio.write_synthetic_dataset(spec, root)
