"""Branched publishing protocol: content-addressed buckets, proof-of-review,
lignification finality, and a deterministic peer simulator."""

# importing the protocol modules populates the codec struct registry
from . import codec, identity, store, bucket, trie, branch, requests, state, review, lignify, ops, sim, scenario  # noqa: F401

__all__ = [
    "codec",
    "identity",
    "store",
    "bucket",
    "trie",
    "branch",
    "requests",
    "state",
    "review",
    "lignify",
    "ops",
    "sim",
    "scenario",
]
