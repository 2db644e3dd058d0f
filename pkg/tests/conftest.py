from __future__ import annotations

import sys
from datetime import datetime, timezone
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from protoflow.clock import VirtualClock
from protoflow.engine import Engine
from protoflow.gateway import NumberPool
from protoflow.packs import load_shipped_pack

START = datetime(2026, 3, 2, 6, 0, tzinfo=timezone.utc)


@pytest.fixture
def clock() -> VirtualClock:
    return VirtualClock(START)


@pytest.fixture
def tre_pack():
    return load_shipped_pack("tre")


@pytest.fixture
def engine(clock, tre_pack) -> Engine:
    eng = Engine(clock=clock, pool=NumberPool(numbers=("+19990000001",)))
    eng.create_study("tre1", "TRE study", tre_pack, staff_addresses=("+15559990000",))
    return eng


@pytest.fixture
def participant(engine) -> str:
    engine.register_participant("tre1", "alice", "+15551234567")
    return "alice"
