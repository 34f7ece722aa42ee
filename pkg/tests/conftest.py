import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from learnet.layers import LayerSpec
from learnet.networks import NetworkSpec

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def tiny_stream(dynamic=True, batchnorm=False, r=3):
    layers = [LayerSpec("conv", size=3, out=3)]
    if batchnorm:
        layers.append(LayerSpec("batchnorm"))
    layers += [LayerSpec("relu"), LayerSpec("maxpool"),
               LayerSpec("conv", size=2, out=4, dynamic=dynamic, r=r if dynamic else None),
               LayerSpec("relu"),
               LayerSpec("conv", size=2, out=5)]
    return tuple(layers)


def tiny_spec(architecture, comparison="dot", precision="float64", batchnorm=False):
    dynamic = architecture not in ("shared", "unshared")
    return NetworkSpec(architecture, comparison, (8, 8, 1), tiny_stream(dynamic, batchnorm), precision=precision)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
