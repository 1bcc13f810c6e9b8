import numpy as np
import pytest

from bidir_mimo.channel_model import TopologySpec, sample_channels

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def make_channels(K=4, N=4, N_k=2, C=1, snr_db=10.0, seed=0, **kw):
    spec = TopologySpec(K, N, N_k, num_cells=C, **kw)
    noise = 10.0 ** (-snr_db / 10.0)
    return sample_channels(spec.with_noise(noise), seed)


def random_bank(sizes, rng, norms=None):
    out = []
    for i, n in enumerate(sizes):
        z = rng.standard_normal((n, 2))
        x = z[:, 0] + 1j * z[:, 1]
        if norms is not None:
            x *= np.sqrt(norms[i]) / np.linalg.norm(x)
        out.append(x)
    return tuple(out)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[num]
        terminalreporter.write_line(
            f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
