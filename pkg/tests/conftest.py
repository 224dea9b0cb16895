import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from synthdata import random_cloud, write_quad_obj  # noqa: E402

from projqa import save_point_cloud  # noqa: E402


@pytest.fixture
def small_cloud_ply(tmp_path):
    """An 800-point random colored cloud written as ASCII PLY."""
    path = tmp_path / "cloud.ply"
    save_point_cloud(random_cloud(800, seed=11), path)
    return path


@pytest.fixture
def quad_obj(tmp_path):
    return write_quad_obj(tmp_path / "mesh")
