import pytest

from kneeplan.model import NetworkConfig


@pytest.fixture
def tiny_config():
    """A scaled-down network with the default topology, fast enough for unit tests."""
    return NetworkConfig(num_hourglasses=2, hourglass_depth=2, stem_channels=8, mid_channels=16,
                         features=16, input_size=64)
