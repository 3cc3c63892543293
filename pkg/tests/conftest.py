import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

import lasr  # noqa: F401 - sets float64 default

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_scene():
    """Level-0 icosphere in front of an 8x8 camera, with colours and a second pose."""
    from lasr.camera import Intrinsics
    from lasr.mesh import make_icosphere
    from lasr.renderer import RasterConfig

    m = make_icosphere(0)
    rng = np.random.default_rng(7)
    verts = torch.as_tensor(m.vertices * 0.8 + np.array([0.05, -0.03, 3.0]))
    nxt = verts + torch.tensor([0.04, 0.02, 0.05])
    colors = torch.as_tensor(rng.uniform(0.1, 0.9, size=(m.num_vertices, 3)))
    K = Intrinsics(torch.tensor(9.0), torch.tensor([3.6, 3.4]))
    K1 = Intrinsics(torch.tensor(9.3), torch.tensor([3.6, 3.4]))
    cfg = RasterConfig((8, 8), sigma=2e-2, gamma=5e-2)
    return dict(mesh=m, verts=verts, next=nxt, colors=colors, K=K, K1=K1, cfg=cfg)


ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    print(ACCEPTANCE_LINES[number])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
