import pytest
from hypothesis import settings

from sptm_sim.world import World, WorldConfig

settings.register_profile("default", max_examples=200, deadline=None)
settings.load_profile("default")

CONCLAVE = "com.apple.corespeechd.conclave"
SIRI = "com.apple.corespeechd.SiriVoiceTriggerService"
MIC = "com.apple.sensors.mic"


@pytest.fixture
def world():
    w = World(WorldConfig())
    w.boot()
    return w


@pytest.fixture
def monitors():
    """Monitors booted and handed off; exclaves left down."""
    w = World(WorldConfig())
    w.boot(exclaves=False)
    return w


@pytest.fixture
def running(world):
    """A host task attached to a launched conclave."""
    host = world.task(100, ["conclave-host"])
    mgr = world.exclaves.conclave_manager(CONCLAVE)
    world.exclaves.conclave_attach(host, world.tasks[1], mgr)
    world.exclaves.conclave_transition(mgr, "launch")
    return world, host, mgr
