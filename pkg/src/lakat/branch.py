"""Branches, submits, conflict detection, and contributor derivation.

A branch is an identified chain of submits with a config and a mutable head.
Submit parents always stay inside the owning lineage; merged-in work is
reachable through belt-tip pointers in the submit trace, never by rebasing.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction

from .codec import (
    ContentId,
    LogicalTimestamp,
    NULL_ID,
    canonical_encode,
    content_id,
    object_id,
    protocol_struct,
)
from .identity import CONTRIBUTION_KINDS, ContributionProof
from .bucket import Bucket, check_context_membership
from .store import MissingRecord, Store
from . import trie as trie_mod

PROPER, TWIG, SPROUT = "proper", "twig", "sprout"
BRANCH_TYPES = (PROPER, TWIG, SPROUT)


class BranchError(Exception):
    pass


class IntegrityError(BranchError):
    """Branch data is internally inconsistent (dangling parent, cycle, ...)."""


@protocol_struct(21)
@dataclass(frozen=True)
class Rational:
    num: int
    den: int

    def value(self) -> Fraction:
        return Fraction(self.num, self.den)


@protocol_struct(22)
@dataclass(frozen=True)
class AcceptanceRule:
    """Review acceptance policy: no rejections at all, or a fraction bound."""

    kind: str  # "no_rejections" | "fraction"
    fraction: Rational = Rational(1, 1)

    def satisfied(self, reviewer_count: int, reject_count: int) -> bool:
        if reviewer_count == 0:
            return False
        if self.kind == "no_rejections":
            return reject_count == 0
        return Fraction(reject_count, reviewer_count) <= 1 - self.fraction.value()


@protocol_struct(9)
@dataclass(frozen=True)
class BranchConfig:
    branch_type: str = TWIG
    accept_conflicts: bool = True
    accepted_proofs: tuple = CONTRIBUTION_KINDS[:4]
    min_reviewers: int = 1
    acceptance_rule: AcceptanceRule = AcceptanceRule("no_rejections")
    min_review_rounds: int = 1
    twig_merge_fraction: Rational = Rational(1, 2)
    lignification_time: int = 10
    engagement_time: int = 10
    broadcasting_buffer: int = 1
    stale_after_merge: bool = True

    def __post_init__(self):
        if isinstance(self.accepted_proofs, list):
            object.__setattr__(self, "accepted_proofs", tuple(self.accepted_proofs))
        if self.branch_type not in BRANCH_TYPES:
            raise BranchError(f"unknown branch type {self.branch_type!r}")

    def to_json(self) -> dict:
        return {
            "branch_type": self.branch_type,
            "accept_conflicts": self.accept_conflicts,
            "accepted_proofs": list(self.accepted_proofs),
            "min_reviewers": self.min_reviewers,
            "acceptance_rule": {
                "kind": self.acceptance_rule.kind,
                "fraction": [self.acceptance_rule.fraction.num, self.acceptance_rule.fraction.den],
            },
            "min_review_rounds": self.min_review_rounds,
            "twig_merge_fraction": [self.twig_merge_fraction.num, self.twig_merge_fraction.den],
            "lignification_time": self.lignification_time,
            "engagement_time": self.engagement_time,
            "broadcasting_buffer": self.broadcasting_buffer,
            "stale_after_merge": self.stale_after_merge,
        }

    @classmethod
    def from_json(cls, data: dict) -> "BranchConfig":
        kwargs = dict(data)
        if "acceptance_rule" in kwargs:
            rule = kwargs["acceptance_rule"]
            num, den = rule.get("fraction", [1, 1])
            kwargs["acceptance_rule"] = AcceptanceRule(rule["kind"], Rational(num, den))
        if "twig_merge_fraction" in kwargs:
            num, den = kwargs["twig_merge_fraction"]
            kwargs["twig_merge_fraction"] = Rational(num, den)
        if "accepted_proofs" in kwargs:
            kwargs["accepted_proofs"] = tuple(kwargs["accepted_proofs"])
        return cls(**kwargs)


@protocol_struct(7)
@dataclass(frozen=True)
class PullRequestTrace:
    review_container: ContentId
    target_branch: ContentId
    requesting_branch: ContentId


@protocol_struct(6)
@dataclass(frozen=True)
class SubmitTrace:
    pull_requests: tuple = ()
    reviews_trace: tuple = ()  # ids of commitment / review-item records
    merged_branch: ContentId | None = None
    belt_tip: ContentId | None = None
    new_buckets: tuple = ()

    def __post_init__(self):
        for name in ("pull_requests", "reviews_trace", "new_buckets"):
            value = getattr(self, name)
            if isinstance(value, list):
                object.__setattr__(self, name, tuple(value))


EMPTY_TRACE = SubmitTrace()


@protocol_struct(8)
@dataclass(frozen=True)
class Submit:
    parent: ContentId
    submit_message: str
    trie_root: ContentId
    submit_trace: SubmitTrace
    timestamp: LogicalTimestamp

    def is_singularity(self) -> bool:
        return self.parent == NULL_ID

    def is_merge(self) -> bool:
        return self.submit_trace.merged_branch is not None


def submit_id(submit: Submit) -> ContentId:
    return object_id(submit)


@protocol_struct(11)
@dataclass(frozen=True)
class BranchSeed:
    """The immutable entries hashed into the branch identifier."""

    parent_branch: ContentId
    timestamp: LogicalTimestamp
    initial_head: ContentId


def compute_branch_id(parent_branch: ContentId, timestamp: LogicalTimestamp, initial_head: ContentId) -> ContentId:
    return object_id(BranchSeed(parent_branch, timestamp, initial_head))


@protocol_struct(17)
@dataclass(frozen=True)
class Veto:
    sprout: ContentId
    contributor: bytes
    tick: int
    signature: bytes

    def message(self) -> bytes:
        return canonical_encode([b"veto", self.sprout, self.contributor, self.tick])


@protocol_struct(18)
@dataclass(frozen=True)
class Vote:
    sprout: ContentId
    voter: bytes
    tick: int
    signature: bytes

    def message(self) -> bytes:
        return canonical_encode([b"vote", self.sprout, self.voter, self.tick])


@protocol_struct(19)
@dataclass(frozen=True)
class SelectionEntry:
    """One contending sprout plus the vetoes and votes it has drawn."""

    sprout: ContentId
    vetoes: tuple = ()
    votes: tuple = ()

    def __post_init__(self):
        if isinstance(self.vetoes, list):
            object.__setattr__(self, "vetoes", tuple(self.vetoes))
        if isinstance(self.votes, list):
            object.__setattr__(self, "votes", tuple(self.votes))


@dataclass
class Branch:
    """Branch state. Identity fields never change after creation; the head,
    consensus entries, token list, config, and staleness evolve."""

    branch_id: ContentId
    parent_branch: ContentId
    timestamp: LogicalTimestamp
    initial_head: ContentId
    stable_head: ContentId
    config: BranchConfig
    sprouts: set = field(default_factory=set)
    sprout_selection: list = field(default_factory=list)  # list[SelectionEntry]
    branch_token: list = field(default_factory=list)  # opaque attestation bytes
    stale: bool = False

    @property
    def branch_type(self) -> str:
        return self.config.branch_type

    def selection_entry(self, sprout: ContentId) -> SelectionEntry | None:
        for entry in self.sprout_selection:
            if entry.sprout == sprout:
                return entry
        return None

    def header_json(self) -> dict:
        return {
            "branch_id": self.branch_id.hex,
            "parent_branch": self.parent_branch.hex,
            "branch_config": self.config.to_json(),
            "stable_head": self.stable_head.hex,
            "sprouts": sorted(s.hex for s in self.sprouts),
            "sprout_selection": [
                {
                    "sprout": entry.sprout.hex,
                    "vetoes": [
                        {"sprout": v.sprout.hex, "contributor": v.contributor.hex(),
                         "tick": v.tick, "signature": v.signature.hex()}
                        for v in entry.vetoes
                    ],
                    "votes": [
                        {"sprout": v.sprout.hex, "voter": v.voter.hex(),
                         "tick": v.tick, "signature": v.signature.hex()}
                        for v in entry.votes
                    ],
                }
                for entry in self.sprout_selection
            ],
            "branch_token": [token.hex() for token in self.branch_token],
            "timestamp": {"tick": self.timestamp.tick,
                          "anchor": self.timestamp.anchor.hex() if self.timestamp.anchor else None},
            "initial_head": self.initial_head.hex,
            "stale": self.stale,
        }

    def header_text(self) -> str:
        return json.dumps(self.header_json(), sort_keys=True)

    def fingerprint(self) -> tuple:
        """Cheap structural stand-in for header_text equality: covers every
        mutable header field (the rest are fixed at creation)."""
        return (
            self.stable_head,
            self.parent_branch,
            self.stale,
            tuple(self.branch_token),
            self.config,
            frozenset(self.sprouts),
            tuple(self.sprout_selection),
        )


def branch_header_from_json(data: dict) -> Branch:
    anchor = data["timestamp"]["anchor"]
    branch = Branch(
        branch_id=ContentId.from_hex(data["branch_id"]),
        parent_branch=ContentId.from_hex(data["parent_branch"]),
        timestamp=LogicalTimestamp(data["timestamp"]["tick"], bytes.fromhex(anchor) if anchor else None),
        initial_head=ContentId.from_hex(data["initial_head"]),
        stable_head=ContentId.from_hex(data["stable_head"]),
        config=BranchConfig.from_json(data["branch_config"]),
        sprouts={ContentId.from_hex(s) for s in data["sprouts"]},
        sprout_selection=[
            SelectionEntry(
                ContentId.from_hex(entry["sprout"]),
                tuple(
                    Veto(ContentId.from_hex(v["sprout"]), bytes.fromhex(v["contributor"]),
                         v["tick"], bytes.fromhex(v["signature"]))
                    for v in entry["vetoes"]
                ),
                tuple(
                    Vote(ContentId.from_hex(v["sprout"]), bytes.fromhex(v["voter"]),
                         v["tick"], bytes.fromhex(v["signature"]))
                    for v in entry["votes"]
                ),
            )
            for entry in data["sprout_selection"]
        ],
        branch_token=[bytes.fromhex(token) for token in data["branch_token"]],
        stale=data["stale"],
    )
    return branch


@dataclass(frozen=True, order=True)
class ConflictRecord:
    """Two included submits sharing one included parent within one branch."""

    branch: ContentId
    parent_submit: ContentId
    left: ContentId
    right: ContentId

    @classmethod
    def normalized(cls, branch, parent_submit, a, b) -> "ConflictRecord":
        left, right = sorted((a, b), key=lambda c: c.hex)
        return cls(branch, parent_submit, left, right)


@dataclass
class ContributorSet:
    """Per-kind contributor keys with the proofs that back them."""

    content: dict = field(default_factory=dict)
    review: dict = field(default_factory=dict)
    token: dict = field(default_factory=dict)
    storage: dict = field(default_factory=dict)

    def kind(self, name: str) -> dict:
        return getattr(self, name)

    def add(self, kind: str, key: bytes, proof: ContributionProof | None = None):
        proofs = self.kind(kind).setdefault(key, [])
        if proof is not None and proof not in proofs:
            proofs.append(proof)

    def has(self, key: bytes, kind: str | None = None) -> bool:
        kinds = [kind] if kind else ["content", "review", "token", "storage"]
        return any(key in self.kind(k) for k in kinds)

    def keys(self, kind: str) -> set:
        return set(self.kind(kind))

    def all_keys(self) -> set:
        out = set()
        for k in ("content", "review", "token", "storage"):
            out |= self.keys(k)
        return out

    def copy(self) -> "ContributorSet":
        return ContributorSet(
            {k: list(v) for k, v in self.content.items()},
            {k: list(v) for k, v in self.review.items()},
            {k: list(v) for k, v in self.token.items()},
            {k: list(v) for k, v in self.storage.items()},
        )


def merge_contributor_union(core_set: ContributorSet, belt_set: ContributorSet, had_pull_request: bool) -> ContributorSet:
    """Union per kind when a pull request preceded the merge; otherwise the
    core set comes back unchanged."""
    if not had_pull_request:
        return core_set.copy()
    merged = core_set.copy()
    for kind in ("content", "review", "token", "storage"):
        for key, proofs in belt_set.kind(kind).items():
            for proof in proofs:
                merged.add(kind, key, proof)
            merged.add(kind, key)
    return merged


def get_submit(store: Store, cid: ContentId) -> Submit:
    obj = store.get_object(cid)
    if not isinstance(obj, Submit):
        raise IntegrityError(f"{cid.hex} is not a submit")
    return obj


def submit_history(branch: Branch, store: Store, follow_parent: bool = False) -> list[Submit]:
    """Submits from the stable head back toward the root, child first.

    Without follow_parent the walk stops at the branch's root submit (the
    initial submit's parent for derived branches, the singularity otherwise);
    with it the walk continues through ancestor branches to the singularity.
    """
    result = []
    seen = set()
    cursor = branch.stable_head
    passed_initial = False
    while cursor != NULL_ID:
        if cursor in seen:
            raise IntegrityError("cycle in submit chain")
        seen.add(cursor)
        try:
            submit = get_submit(store, cursor)
        except MissingRecord:
            raise IntegrityError(f"dangling submit {cursor.hex}")
        result.append(submit)
        if not follow_parent and passed_initial:
            break
        if cursor == branch.initial_head:
            passed_initial = True
            if not follow_parent and submit.parent == NULL_ID:
                break
        cursor = submit.parent
    return result


def history_ids(branch: Branch, store: Store, follow_parent: bool = False) -> list[ContentId]:
    return [submit_id(s) for s in submit_history(branch, store, follow_parent)]


def ancestry_ids(store: Store, head: ContentId) -> list[ContentId]:
    """Parent-chain submit ids from head to the singularity."""
    out = []
    seen = set()
    cursor = head
    while cursor != NULL_ID:
        if cursor in seen:
            raise IntegrityError("cycle in submit chain")
        seen.add(cursor)
        out.append(cursor)
        cursor = get_submit(store, cursor).parent
    return out


def included_submits(store: Store, head: ContentId) -> dict[ContentId, Submit]:
    """Inclusion closure: the parent chain of `head` plus, transitively, the
    parent chains hanging off every merge submit's belt tip.

    The closure of a head never changes, so it is memoized on the store.
    Treat the result as read-only.
    """
    cached = store.closure_cache.get(head)
    if cached is not None:
        return cached
    included: dict[ContentId, Submit] = {}
    frontier = [head]
    while frontier:
        cursor = frontier.pop()
        while cursor != NULL_ID and cursor not in included:
            submit = get_submit(store, cursor)
            included[cursor] = submit
            tip = submit.submit_trace.belt_tip
            if tip is not None:
                frontier.append(tip)
            cursor = submit.parent
    store.closure_cache[head] = included
    return included


def conflict_records(
    store: Store, included: dict[ContentId, Submit], branch_id: ContentId
) -> set[ConflictRecord]:
    """All (parent, left, right) triples inside the inclusion set.

    A merge submit never conflicts with submits of the belt it merged: the
    pair (merge, x) is dropped when x lies in the closure of that merge's
    own belt tip.
    """
    children: dict[ContentId, list[ContentId]] = {}
    for cid, submit in included.items():
        if submit.parent != NULL_ID and submit.parent in included:
            children.setdefault(submit.parent, []).append(cid)
    belt_closure: dict[ContentId, set[ContentId]] = {}

    def own_belt(merge_cid: ContentId) -> set[ContentId]:
        closure = belt_closure.get(merge_cid)
        if closure is None:
            tip = included[merge_cid].submit_trace.belt_tip
            closure = set(included_submits(store, tip)) if tip is not None else set()
            belt_closure[merge_cid] = closure
        return closure

    conflicts = set()
    for parent, kids in children.items():
        if len(kids) < 2:
            continue
        for i in range(len(kids)):
            for j in range(i + 1, len(kids)):
                a, b = kids[i], kids[j]
                if included[a].is_merge() and b in own_belt(a):
                    continue
                if included[b].is_merge() and a in own_belt(b):
                    continue
                conflicts.add(ConflictRecord.normalized(branch_id, parent, a, b))
    return conflicts


def detect_conflicts(branch: Branch, store: Store) -> set[ConflictRecord]:
    included = included_submits(store, branch.stable_head)
    return conflict_records(store, included, branch.branch_id)


def collect_evidence(branch: Branch, store: Store) -> set[ContentId]:
    """Every id a contribution proof may legitimately cite: the submits from
    root to head, the belt closures reachable from merge submits in that
    range, the records those submits introduce (buckets, commitments, review
    items, containers), plus storage and token attestations."""
    evidence: set[ContentId] = set()
    history = submit_history(branch, store)
    reachable: dict[ContentId, Submit] = {submit_id(s): s for s in history}
    for submit in history:
        tip = submit.submit_trace.belt_tip
        if tip is not None:
            reachable.update(included_submits(store, tip))
    for cid, submit in reachable.items():
        evidence.add(cid)
        trace = submit.submit_trace
        evidence.update(trace.new_buckets)
        evidence.update(trace.reviews_trace)
        for pr in trace.pull_requests:
            evidence.add(pr.review_container)
    if history:
        head_trie = trie_mod.Trie(history[0].trie_root, store)
        for _, value_hash in trie_mod.items(head_trie):
            try:
                info = store.get_object(value_hash)
            except MissingRecord:
                continue
            for attestation in getattr(info, "storage_proofs", ()):
                evidence.add(object_id(attestation))
    for token in branch.branch_token:
        evidence.add(content_id(token))
    return evidence


def derive_contributors(
    branch: Branch,
    proofs: list[ContributionProof],
    store: Store,
    evidence: set | None = None,
    skip_verify: bool = False,
) -> ContributorSet:
    """Partition valid proofs by kind, dropping invalid signatures, foreign
    branches, disallowed kinds, and evidence outside root..head.

    Callers that pre-verify signatures or pre-compute the evidence closure
    can pass those in to avoid repeating the work.
    """
    result = ContributorSet()
    if evidence is None:
        evidence = collect_evidence(branch, store)
    for proof in proofs:
        if proof.branch_id != branch.branch_id:
            continue
        if proof.kind not in ("content", "review", "token", "storage"):
            continue
        if proof.kind not in branch.config.accepted_proofs:
            continue
        if not skip_verify and not proof.verify():
            continue
        if proof.evidence not in evidence:
            continue
        result.add(proof.kind, proof.contributor, proof)
    return result


@dataclass
class BranchVerdict:
    failures: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures

    def fail(self, code: str, detail: str = ""):
        self.failures.append((code, detail))

    def codes(self) -> list[str]:
        return [code for code, _ in self.failures]


def verify_branch(branch: Branch, store: Store) -> BranchVerdict:
    """Integrity check: id recomputation, acyclic history, monotone ticks,
    context membership of every submit, and the conflict policy."""
    verdict = BranchVerdict()
    recomputed = compute_branch_id(branch.parent_branch, branch.timestamp, branch.initial_head)
    if recomputed != branch.branch_id:
        verdict.fail("branch-id-mismatch", branch.branch_id.hex)
    cursor = branch.stable_head
    history_pairs = []
    seen = set()
    while cursor != NULL_ID:
        if cursor in seen:
            verdict.fail("history-integrity", "cycle in submit chain")
            return verdict
        seen.add(cursor)
        try:
            raw = store.get(cursor)
        except MissingRecord:
            verdict.fail("history-integrity", f"dangling submit {cursor.hex}")
            return verdict
        if content_id(raw) != cursor:
            verdict.fail("submit-id-mismatch", cursor.hex)
        submit = store.get_object(cursor)
        if not isinstance(submit, Submit):
            verdict.fail("history-integrity", f"{cursor.hex} is not a submit")
            return verdict
        history_pairs.append((cursor, submit))
        cursor = submit.parent
    history = [submit for _, submit in history_pairs]
    for child, parent in zip(history, history[1:]):
        if child.timestamp.tick < parent.timestamp.tick:
            verdict.fail("timestamp-regression", submit_id(child).hex)
    for submit in history:
        new_ids = set(submit.submit_trace.new_buckets)
        if not new_ids:
            continue
        submit_buckets = {}
        for cid in new_ids:
            try:
                obj = store.get_object(cid)
            except MissingRecord:
                verdict.fail("missing-bucket", cid.hex)
                continue
            if isinstance(obj, Bucket):
                submit_buckets[cid] = obj
        if set(submit_buckets) != new_ids:
            continue
        if not check_context_membership(new_ids, submit_buckets, store):
            verdict.fail("context-membership", submit_id(submit).hex)
    if not branch.config.accept_conflicts:
        if detect_conflicts(branch, store):
            verdict.fail("conflict-policy", "conflicts present but not accepted")
    return verdict
