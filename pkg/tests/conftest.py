import numpy as np
import pytest

from arbor.envelope import MarkerSet
from arbor.growth import GenusParams, TreeSkeleton


def chain(points, radius=0.01, genus="test") -> TreeSkeleton:
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    r = np.broadcast_to(np.asarray(radius, dtype=np.float64), (n,))
    return TreeSkeleton(pts, np.arange(n) - 1, r, np.arange(n), genus)


def sphere_markers(n=4000, radius=1.0, centre=(0.0, 0.0, 2.0), seed=0) -> MarkerSet:
    """Exactly ``n`` points uniform in a ball (radius by cube-root inversion)."""
    gen = np.random.default_rng(seed)
    d = gen.standard_normal((n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    r = radius * gen.random(n) ** (1.0 / 3.0)
    return MarkerSet(np.asarray(centre) + r[:, None] * d)


SPHERE_PARAMS = GenusParams("sphere-test", perception_radius=0.3, perception_angle=90.0, kill_distance=0.1,
                            internode_length=0.05, branching_angle=60.0, max_steps=400)


@pytest.fixture
def sphere_params():
    return SPHERE_PARAMS


@pytest.fixture(scope="session")
def grown_sphere_tree():
    from arbor.growth import grow

    return grow((0.0, 0.0, 0.0), sphere_markers(), SPHERE_PARAMS, seed=0, return_markers=True)


# -- acceptance reporting: one PASS/FAIL line per criterion in the terminal summary --------

_CRITERIA: dict[int, tuple[str, str, float]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (rep.when != "call" and not rep.failed):
        return
    n = marker.args[0]
    desc = (item.function.__doc__ or item.name).strip().splitlines()[0]
    prev = _CRITERIA.get(n)
    status = "PASS" if rep.passed else "FAIL"
    if prev is None or status == "FAIL":
        _CRITERIA[n] = (status, desc, rep.duration + (prev[2] if prev else 0.0))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, desc, secs = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {desc}  ({secs:.1f}s)")
