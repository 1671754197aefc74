import numpy as np
import pytest
import torch

from fiberinfer.forward import default_scheme
from fiberinfer.mdn import MdnArch, MdnModel, MdnNet

torch.set_num_threads(1)

# summary lines from test_acceptance.py, printed after the run
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def scheme():
    return default_scheme()


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_rotation(rng):
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


def constant_model(w, means, stds, n=1, input_dim=8):
    """Model whose mixture ignores its input: head weights zero, biases set."""
    w, means, stds = (np.asarray(a, float) for a in (w, means, stds))
    K = w.size
    net = MdnNet(MdnArch(input_dim=input_dim, hidden=16, depth=2, components=K), dtype=torch.float64)
    with torch.no_grad():
        net.head.weight.zero_()
        net.head.bias.copy_(torch.as_tensor(np.concatenate([np.log(w), means.ravel(), 2 * np.log(stds).ravel()])))
    net = net.float()
    z = np.zeros(5)
    return MdnModel(n, net, np.zeros(input_dim), np.ones(input_dim), z, np.ones(5))


def tensor_axis_inverter():
    """Untrained linear stand-in for the inverter.

    The ODF is minus the degree-2 part of the outer shell signal. Its single
    peak is the axis of strongest attenuation, which is the fiber axis for
    one-fiber voxels.
    """
    from fiberinfer.inverter import InverterArch, SpectralNet

    net = SpectralNet(InverterArch(widths=(2, 1, 1), nonlinearity=False), dtype=torch.float64)
    with torch.no_grad():
        net.weights[0].zero_()
        net.weights[0][1, 0, 1] = -1.0
        net.weights[1].fill_(1.0)
        for b in net.biases:
            b.zero_()
    return net
