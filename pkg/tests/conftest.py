"""Shared fixtures: a provisioned monitor with a small zygote and functions."""

from __future__ import annotations

import pytest

from walletemu.crypto import Rng
from walletemu.images import FunctionSpec, PipelineOp, ZygoteImage, manifest_entry
from walletemu.memory import CostModel, FrameStore, MemoryPool
from walletemu.monitor import Monitor, MonitorConfig
from walletemu.provider import FunctionProvider, UserAgent

MIB = 1048576


@pytest.fixture
def model():
    return CostModel()


@pytest.fixture
def store():
    return FrameStore()


@pytest.fixture
def pool(store):
    p = MemoryPool(store)
    p.grow(65536, validated=False)
    return p


@pytest.fixture
def warm_pool(store):
    p = MemoryPool(store, prevalidated=True)
    p.grow(65536, validated=True)
    return p


EXTERNAL_CONTENT = b"external file payload: lorem ipsum dolor sit amet\n" * 8


def small_image() -> ZygoteImage:
    return ZygoteImage(
        "py-rt", init_cost_ms=5,
        embedded_fs=[("/data/x", b"42"), ("/data/motd", b"hi there")],
        manifest=[manifest_entry("/ext/blob", EXTERNAL_CONTENT)])


def echo_fn() -> FunctionSpec:
    return FunctionSpec("echo", [PipelineOp.identity()], exec_time_ms=1.0)


def shout_fn() -> FunctionSpec:
    return FunctionSpec("shout", [PipelineOp.uppercase(),
                                  PipelineOp.append(b"!")], exec_time_ms=0.5)


def hash_fn() -> FunctionSpec:
    return FunctionSpec("hash", [PipelineOp.sha512()], exec_time_ms=0.0)


def reader_fn(path: str = "/ext/blob") -> FunctionSpec:
    return FunctionSpec("reader", [PipelineOp.read_file(path)],
                        exec_time_ms=0.0)


@pytest.fixture
def rig():
    """Booted + provisioned monitor with a sealed zygote and three functions."""
    return make_rig()


class Rig:
    def __init__(self, monitor, provider, user, image, functions, zygote):
        self.monitor = monitor
        self.provider = provider
        self.user = user
        self.image = image
        self.functions = functions
        self.zygote = zygote

    def expectations(self, request):
        return self.user.expectations(
            request, self.monitor.machine_key.public_bytes(),
            self.monitor.monitor_digest,
            [self.image.digest()],
            [fn.digest() for fn in self.functions])


def make_rig(seed: int = 0, prealloc: int = 64 * MIB, cow: bool = True,
             image: ZygoteImage | None = None,
             functions: list[FunctionSpec] | None = None,
             chains: tuple = ()) -> Rig:
    image = image if image is not None else small_image()
    functions = functions if functions is not None else [
        echo_fn(), shout_fn(), hash_fn(), reader_fn()]
    config = MonitorConfig(prealloc_bytes=prealloc, pool_frames=0,
                           cow_enabled=cow, seed=seed)
    monitor = Monitor(config)
    monitor.guest.put_file("/ext/blob", EXTERNAL_CONTENT)
    provider = FunctionProvider(Rng(seed + 1), [image.digest()],
                                [fn.digest() for fn in functions], chains)
    provider.provision(monitor)
    user = UserAgent(Rng(seed + 2), provider.public_key())
    zygote = monitor.create_zygote(image)
    return Rig(monitor, provider, user, image, functions, zygote)
