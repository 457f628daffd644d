import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from moexda.data import SyntheticSceneSpec, generate_dataset  # noqa: E402


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """12 videos, K=4, rho=1, 8 frames of 16x16."""
    root = tmp_path_factory.mktemp("small")
    spec = SyntheticSceneSpec(num_classes=4, rho=1.0, num_videos=12, frames_per_video=8,
                              image_size=16, actor_size=(3, 5), seed=5)
    generate_dataset(spec, root)
    return root
