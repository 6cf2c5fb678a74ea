"""Per-peer protocol state: stores, branch map, proofs, and submit building.

One ProtocolState is one peer's view of the world.  Every direct push
funnels through append_submit so the append-side invariants (staleness,
parent match, tick monotonicity, context membership) hold on every path;
proper branch heads move only through the lignification walk.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from .codec import ContentId, LogicalTimestamp, NULL_ID
from .identity import ContributionProof, KeyIdentity
from .bucket import (
    Bucket,
    InfoDelta,
    attach_info,
    check_context_membership,
    create_atomic_bucket,
    create_molecular_bucket,
    extract_refs,
    fresh_info,
)
from .branch import (
    Branch,
    ContributorSet,
    Submit,
    SubmitTrace,
    collect_evidence,
    derive_contributors,
    get_submit,
    included_submits,
    merge_contributor_union,
)
from .requests import BranchRequests
from .store import MemoryStore, MissingRecord, Store
from . import trie as trie_mod


@dataclass(frozen=True)
class Verdict:
    ok: bool
    code: str = "ok"
    detail: str = ""

    @classmethod
    def fail(cls, code: str, detail: str = "") -> "Verdict":
        return cls(False, code, detail)


OK = Verdict(True)


class ProtocolState:
    """A peer's stores, branches, proofs, wraps, and staging channels."""

    def __init__(self, store: Store | None = None, channel_capacity: int = 64):
        self.store: Store = store if store is not None else MemoryStore()
        self.branches: dict[ContentId, Branch] = {}
        self.proofs: dict[ContentId, list[ContributionProof]] = {}
        self.wraps: dict[ContentId, "object"] = {}  # sprout id -> SproutWrap
        self.ousted: dict[ContentId, ContentId] = {}  # sprout id -> reference branch
        self.spent: set[ContentId] = set()  # sprouts absorbed by donation
        self.requests: dict[ContentId, BranchRequests] = {}
        self.channel_capacity = channel_capacity
        self._proof_ok: dict[ContributionProof, bool] = {}
        self._evidence_cache: dict[tuple, set] = {}

    # -- registration ------------------------------------------------------

    def add_branch(self, branch: Branch):
        self.branches[branch.branch_id] = branch
        self.requests.setdefault(branch.branch_id, BranchRequests(self.channel_capacity))

    def branch(self, branch_id: ContentId) -> Branch:
        return self.branches[branch_id]

    def requests_for(self, branch_id: ContentId) -> BranchRequests:
        return self.requests.setdefault(branch_id, BranchRequests(self.channel_capacity))

    def add_proof(self, proof: ContributionProof):
        proofs = self.proofs.setdefault(proof.branch_id, [])
        if proof not in proofs:
            proofs.append(proof)

    def head_submit(self, branch_id: ContentId) -> Submit:
        return get_submit(self.store, self.branches[branch_id].stable_head)

    def head_trie(self, branch_id: ContentId) -> trie_mod.Trie:
        return trie_mod.Trie(self.head_submit(branch_id).trie_root, self.store)

    # -- contributors ------------------------------------------------------

    def _verified(self, proof: ContributionProof) -> bool:
        cached = self._proof_ok.get(proof)
        if cached is None:
            cached = proof.verify()
            self._proof_ok[proof] = cached
        return cached

    def _evidence(self, branch: Branch) -> set:
        # the closure is a function of the head (chain + trie) and the token list
        key = (branch.branch_id, branch.stable_head, len(branch.branch_token))
        cached = self._evidence_cache.get(key)
        if cached is None:
            cached = collect_evidence(branch, self.store)
            self._evidence_cache[key] = cached
        return cached

    def contributors(self, branch_id: ContentId, _visited: set | None = None) -> ContributorSet:
        """Operational contributor set: directly proved contributions, sprout
        wrap seeds, and merge unions for pull-request-preceded merges."""
        visited = _visited if _visited is not None else set()
        if branch_id in visited or branch_id not in self.branches:
            return ContributorSet()
        visited.add(branch_id)
        branch = self.branches[branch_id]
        result = derive_contributors(
            branch,
            [p for p in self.proofs.get(branch_id, []) if self._verified(p)],
            self.store,
            evidence=self._evidence(branch),
            skip_verify=True,
        )
        wrap = self.wraps.get(branch_id)
        if wrap is not None:
            result.add("content", wrap.creator)
            requesting = self.contributors(wrap.requesting_branch, visited)
            result = merge_contributor_union(result, requesting, True)
        for cid, submit in included_submits(self.store, branch.stable_head).items():
            trace = submit.submit_trace
            if trace.merged_branch is None:
                continue
            belt_id = trace.merged_branch
            if belt_id not in self.branches:
                continue
            if self._merge_had_pull_request(branch_id, belt_id):
                belt_set = self.contributors(belt_id, visited)
                result = merge_contributor_union(result, belt_set, True)
        return result

    def _merge_had_pull_request(self, core_id: ContentId, belt_id: ContentId) -> bool:
        belt = self.branches[belt_id]
        for submit in included_submits(self.store, belt.stable_head).values():
            for pr in submit.submit_trace.pull_requests:
                if pr.target_branch == core_id and pr.requesting_branch == belt_id:
                    return True
        return False

    def is_contributor(self, branch_id: ContentId, key: bytes, kind: str | None = None) -> bool:
        return self.contributors(branch_id).has(key, kind)

    # -- submit appending --------------------------------------------------

    def append_submit(self, branch_id: ContentId, submit: Submit) -> tuple[Verdict, ContentId | None]:
        """Validate and append a submit to a directly-pushable branch head.

        Only twigs move their head this way: sprout heads are immutable and
        proper branches advance exclusively through lignification.
        """
        branch = self.branches.get(branch_id)
        if branch is None:
            return Verdict.fail("unknown-branch", branch_id.hex), None
        if branch.stale:
            return Verdict.fail("submit-to-stale", branch_id.hex), None
        if branch.branch_type == "sprout":
            return Verdict.fail("sprout-immutable"), None
        if branch.branch_type == "proper":
            return Verdict.fail("proper-head-lignification-only"), None
        if submit.parent != branch.stable_head:
            return Verdict.fail("stale-parent", submit.parent.hex), None
        head = get_submit(self.store, branch.stable_head)
        if submit.timestamp.tick < head.timestamp.tick:
            return Verdict.fail("timestamp-regression"), None
        new_ids = set(submit.submit_trace.new_buckets)
        submit_buckets = {}
        for cid in new_ids:
            try:
                obj = self.store.get_object(cid)
            except MissingRecord:
                return Verdict.fail("missing-bucket", cid.hex), None
            if isinstance(obj, Bucket):
                submit_buckets[cid] = obj
        if not check_context_membership(new_ids, submit_buckets, self.store):
            return Verdict.fail("context-membership"), None
        cid = self.store.put_object(submit)
        branch.stable_head = cid
        return OK, cid


def build_content_submit(
    state: ProtocolState,
    branch: Branch,
    author: KeyIdentity,
    message: str,
    now: LogicalTimestamp,
    payloads: list[bytes] = (),
    attachments: list[tuple[ContentId, InfoDelta]] = (),
    trace: SubmitTrace | None = None,
    parent_override: ContentId | None = None,
    base_trie_root: ContentId | None = None,
) -> Submit:
    """Assemble a submit: create buckets for each payload, wrap them in a
    fresh molecular context bucket, apply info attachments, and maintain the
    reverse containment registry inside the trie."""
    store = state.store
    parent = parent_override if parent_override is not None else branch.stable_head
    if base_trie_root is None:
        base_trie_root = get_submit(store, parent).trie_root
    trie = trie_mod.Trie(base_trie_root, store)
    creator_root = store.put(author.public_key)
    new_buckets: list[ContentId] = []
    atomic_ids: list[ContentId] = []
    for payload in payloads:
        refs = extract_refs(payload)
        _, bucket_id = create_atomic_bucket(store, creator_root, NULL_ID, payload, refs, now)
        atomic_ids.append(bucket_id)
        new_buckets.append(bucket_id)
        trie = trie_mod.insert(trie, bucket_id, fresh_info(refs))
    if atomic_ids:
        _, molecular_id = create_molecular_bucket(store, creator_root, NULL_ID, atomic_ids, now)
        new_buckets.append(molecular_id)
        trie = trie_mod.insert(trie, molecular_id, fresh_info(atomic_ids))
        for member in atomic_ids:
            info = trie_mod.get(trie, member)
            info = attach_info(info, InfoDelta(bucket_refs_in=(molecular_id,)))
            trie = trie_mod.insert(trie, member, info)
    for bucket_id, delta in attachments:
        info = trie_mod.get(trie, bucket_id)
        if info is None:
            info = fresh_info([])
        info = attach_info(info, delta)
        trie = trie_mod.insert(trie, bucket_id, info)
    base_trace = trace if trace is not None else SubmitTrace()
    full_trace = replace(base_trace, new_buckets=tuple(new_buckets) + tuple(base_trace.new_buckets))
    return Submit(parent, message, trie.root, full_trace, now)
