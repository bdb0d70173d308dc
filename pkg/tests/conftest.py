import pytest

from chainkv.core import SchemaKey
from chainkv.harness.cluster import SimCluster


def K(name, schema="default"):
    return SchemaKey(schema, name.encode() if isinstance(name, str) else name)


def run(cluster, coro, until=None):
    """Drive one coroutine to completion inside the simulator and return its result."""
    task = cluster.spawn(coro)
    cluster.run(stop=lambda: task.done, until=until)
    assert task.done, "simulation went idle before the coroutine finished"
    return task.result()


@pytest.fixture
def cluster():
    return SimCluster(n_servers=4, f=1, partitions=8, seed=11)
