import random

import pytest

from lakat.codec import LogicalTimestamp, NULL_ID
from lakat.identity import KeyIdentity
from lakat.branch import AcceptanceRule, BranchConfig, Rational
from lakat.state import ProtocolState
from lakat.store import MemoryStore


@pytest.fixture
def rng():
    return random.Random(0xC0FFEE)


@pytest.fixture
def alice():
    return KeyIdentity.from_seed(b"alice")


@pytest.fixture
def bob():
    return KeyIdentity.from_seed(b"bob")


@pytest.fixture
def carol():
    return KeyIdentity.from_seed(b"carol")


@pytest.fixture
def store():
    return MemoryStore()


@pytest.fixture
def state():
    return ProtocolState(MemoryStore())


def tick(n: int) -> LogicalTimestamp:
    return LogicalTimestamp(n)


def twig_config(**overrides) -> BranchConfig:
    defaults = dict(
        branch_type="twig",
        accept_conflicts=True,
        min_reviewers=1,
        acceptance_rule=AcceptanceRule("no_rejections"),
        min_review_rounds=1,
        twig_merge_fraction=Rational(1, 2),
        lignification_time=10,
        engagement_time=10,
        broadcasting_buffer=1,
        stale_after_merge=True,
    )
    defaults.update(overrides)
    return BranchConfig(**defaults)


def proper_config(**overrides) -> BranchConfig:
    overrides.setdefault("branch_type", "proper")
    overrides.setdefault("stale_after_merge", False)
    return twig_config(**overrides)
