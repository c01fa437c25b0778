"""Shared fixtures: bundled presets plus a small hand-checkable device."""

import pytest

from coresel.simdevice import GovernorKind, GroundTruthModel, SimulatedDevice, load_preset
from coresel.topology import Cluster, CoreType, CpuTopology

TINY_TOPOLOGY = CpuTopology(
    device_name="tiny",
    clusters=(
        Cluster(1, 3.0, 1.0, CoreType.PRIME),
        Cluster(2, 2.0, 0.5, CoreType.EFFICIENT),
    ),
)

TINY_TRUTH = GroundTruthModel(
    static_power_w=2.0,
    kappa_prime=0.16,
    kappa_performance=0.12,
    kappa_efficient=0.08,
    gamma=2.0,
    idle_fraction=0.5,
    mem_ceiling_tps=20.0,
    throughput_half=1.0,
    ipc=(1.0, 0.5),
)


def make_tiny(**overrides) -> SimulatedDevice:
    kwargs = dict(topology=TINY_TOPOLOGY, governor=GovernorKind.CAPACITY_SCALED, truth=TINY_TRUTH)
    kwargs.update(overrides)
    return SimulatedDevice(**kwargs)


@pytest.fixture
def tiny() -> SimulatedDevice:
    return make_tiny()


@pytest.fixture(scope="session")
def mate40() -> SimulatedDevice:
    return load_preset("mate40pro")
