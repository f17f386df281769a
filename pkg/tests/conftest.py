import numpy as np
import pytest

from filigree import HandcraftedExtractor, gen_benchmark
from filigree.retrieval import read_manifest


@pytest.fixture(scope="session")
def extractor():
    return HandcraftedExtractor()


@pytest.fixture(scope="session")
def corpus10(tmp_path_factory):
    """10-class benchmark with 2 photos per class (1 train + 1 test)."""
    out = tmp_path_factory.mktemp("corpus10")
    manifest = gen_benchmark(out, n_classes=10, photos_per_class=2, seed=11)
    return read_manifest(manifest)


@pytest.fixture(scope="session")
def corpus4(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus4")
    manifest = gen_benchmark(out, n_classes=4, photos_per_class=2, seed=5)
    return read_manifest(manifest)


def random_unit_map(rng: np.random.Generator, h, w, d, scale_id=0,
                    orientation_id=0):
    from filigree import FeatureMap, normalize_features
    data = rng.normal(size=(h, w, d)).astype(np.float32)
    return normalize_features(FeatureMap(data, scale_id=scale_id,
                                         orientation_id=orientation_id))


def random_pyramid(rng: np.random.Generator, grids, d, orientation_id=0):
    from filigree import FeaturePyramid
    maps = [random_unit_map(rng, g, g, d, scale_id=i,
                            orientation_id=orientation_id)
            for i, g in enumerate(grids)]
    return FeaturePyramid(tuple(maps), orientation_id)
