import numpy as np
import pytest

from goalnav.data import Episode
from goalnav.model import ModelConfig
from goalnav.sim import generate_world


def random_frames(n, size=8, seed=0):
    return np.random.default_rng(seed).integers(0, 256, (n, size, size, 3), dtype=np.uint8)


def episode_from_poses(poses, size=8, seed=0, meta=None):
    poses = np.asarray(poses, dtype=np.float64)
    return Episode(random_frames(len(poses), size, seed), poses, dict(meta or {}))


def straight_episode(n, step=1.0, size=8):
    """``n`` frames moving ``step`` along +x with yaw 0."""
    return episode_from_poses([[i * step, 0.0, 0.0] for i in range(n)], size)


def random_walk(n, rng, size=8):
    yaw = np.cumsum(rng.uniform(-0.5, 0.5, n))
    step = rng.uniform(0.5, 1.5, n)
    xy = np.cumsum(np.stack([step * np.cos(yaw), step * np.sin(yaw)], 1), 0)
    return episode_from_poses(np.column_stack([xy, yaw]), size, seed=int(rng.integers(1 << 30)))


@pytest.fixture(scope="session")
def world16():
    return generate_world(0, 16, 0.2)


@pytest.fixture
def tiny_cfg():
    return ModelConfig(image_size=16, patch_size=8, embed_dim=16, depth=1, heads=2, mlp_ratio=2, head_hidden=16)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance(capsys):
    """Print one ``PASS``/``FAIL`` line per criterion, live and in the summary."""

    def report(n, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {n:2d}: {detail}"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line, flush=True)
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
