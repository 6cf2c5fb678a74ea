"""Branch operations: genesis and rooted creation, the directed core-belt
merge with set semantics, staleness, and merge-gated config changes.

A merge never rebases: the merge submit's parent stays in the core lineage,
the belt's buckets enter the core trie, and one belt-tip pointer in the
trace keeps the belt's submits reachable.
"""

from __future__ import annotations

from dataclasses import dataclass

from .codec import ContentId, LogicalTimestamp, NULL_ID
from .identity import KeyIdentity, make_contribution_proof
from .bucket import InfoDelta, attach_info, arrangement_of, is_molecular
from .branch import (
    Branch,
    BranchConfig,
    PROPER,
    SPROUT,
    TWIG,
    Submit,
    SubmitTrace,
    compute_branch_id,
    conflict_records,
    get_submit,
    included_submits,
    submit_id,
    verify_branch,
)
from .review import PullRequest, check_maturity, merge_ready
from .state import ProtocolState
from . import trie as trie_mod


class BranchOpError(Exception):
    pass


class InvalidBranchType(BranchOpError):
    pass


class InvalidRoot(BranchOpError):
    pass


class StaleBranch(BranchOpError):
    pass


class InvalidMerge(BranchOpError):
    pass


def create_genesis_branch(
    state: ProtocolState,
    config: BranchConfig,
    creator: KeyIdentity,
    now: LogicalTimestamp,
    token_attestation: bytes | None = None,
    message: str | None = None,
) -> Branch:
    """A branch with a fresh singularity submit; twig or proper only.

    The default genesis message carries the creator key so that two creators
    founding branches in the same tick do not collapse onto one identifier.
    """
    if config.branch_type not in (TWIG, PROPER):
        raise InvalidBranchType("genesis creations are either twigs or proper branches")
    store = state.store
    if message is None:
        message = f"genesis:{creator.public_key.hex()[:16]}"
    empty = trie_mod.empty_trie(store)
    singularity = Submit(NULL_ID, message, empty.root, SubmitTrace(), now)
    head = store.put_object(singularity)
    branch_id = compute_branch_id(NULL_ID, now, head)
    branch = Branch(
        branch_id=branch_id,
        parent_branch=NULL_ID,
        timestamp=now,
        initial_head=head,
        stable_head=head,
        config=config,
    )
    if token_attestation is not None:
        branch.branch_token.append(token_attestation)
    state.add_branch(branch)
    state.add_proof(make_contribution_proof(creator, branch_id, "content", head))
    state.requests_for(branch_id).enqueue("branch_creation_broadcast", branch.header_text())
    return branch


def create_rooted_branch(
    state: ProtocolState,
    root_submit: ContentId,
    parent_branch: ContentId,
    creator: KeyIdentity,
    now: LogicalTimestamp,
    config: BranchConfig | None = None,
    message: str | None = None,
) -> Branch:
    """Derive a branch from a submit in the parent's history.  Anyone may do
    this; the config is inherited unless replaced."""
    parent = state.branches.get(parent_branch)
    if parent is None:
        raise InvalidRoot(f"unknown parent branch {parent_branch.hex}")
    if message is None:
        message = f"rooted:{creator.public_key.hex()[:16]}"
    ancestry = set(included_submits(state.store, parent.stable_head))
    if root_submit not in ancestry:
        raise InvalidRoot("root submit is not in the parent branch history")
    branch_config = config if config is not None else parent.config
    if branch_config.branch_type == SPROUT:
        raise InvalidBranchType("rooted creations are twigs or proper branches")
    store = state.store
    root = get_submit(store, root_submit)
    initial = Submit(root_submit, message, root.trie_root, SubmitTrace(), now)
    head = store.put_object(initial)
    branch_id = compute_branch_id(parent_branch, now, head)
    branch = Branch(
        branch_id=branch_id,
        parent_branch=parent_branch,
        timestamp=now,
        initial_head=head,
        stable_head=head,
        config=branch_config,
    )
    state.add_branch(branch)
    state.add_proof(make_contribution_proof(creator, branch_id, "content", head))
    state.requests_for(branch_id).enqueue("branch_creation_broadcast", branch.header_text())
    return branch


@dataclass
class MergePlan:
    core: ContentId
    belt: ContentId
    pr: PullRequest | None
    bucket_delta: set
    belt_tip: ContentId
    conflicts: set
    root_at: ContentId

    def report(self) -> str:
        return (
            f"merge core={self.core.hex[:10]} belt={self.belt.hex[:10]} "
            f"delta={len(self.bucket_delta)} conflicts={len(self.conflicts)}"
        )


def plan_merge(
    state: ProtocolState,
    core_id: ContentId,
    belt_id: ContentId,
    pr: PullRequest | None = None,
    root_at: ContentId | None = None,
) -> MergePlan:
    """Compute the bucket delta and the conflicts the merged state would hold.

    root_at names the branch whose head the merge submit will extend: the
    core itself, or one of its live sprouts when the core advances through
    lignification.
    """
    core = state.branches[core_id]
    belt = state.branches[belt_id]
    root_id = root_at if root_at is not None else core_id
    rooting = state.branches[root_id]
    store = state.store
    core_buckets = trie_mod.bucket_ids(trie_mod.Trie(get_submit(store, core.stable_head).trie_root, store))
    belt_buckets = trie_mod.bucket_ids(trie_mod.Trie(get_submit(store, belt.stable_head).trie_root, store))
    delta = belt_buckets - core_buckets
    merged_view = dict(included_submits(store, rooting.stable_head))
    merged_view.update(included_submits(store, belt.stable_head))
    conflicts = conflict_records(store, merged_view, core_id)
    return MergePlan(core_id, belt_id, pr, delta, belt.stable_head, conflicts, root_id)


def execute_merge(
    state: ProtocolState,
    plan: MergePlan,
    author: KeyIdentity,
    now: LogicalTimestamp,
    approvals: set[bytes] | None = None,
    message: str = "merge",
) -> Submit:
    """Build and apply the merge submit.

    Twig cores apply directly under the approval fraction; proper cores get
    the submit back for sprout wrapping and lignification.  The belt is left
    untouched apart from the configured staleness flag.
    """
    core = state.branches[plan.core]
    belt = state.branches[plan.belt]
    rooting = state.branches[plan.root_at]
    store = state.store
    if core.stale:
        raise StaleBranch("core is stale")
    if belt.stale:
        raise StaleBranch("belt is stale")
    belt_verdict = verify_branch(belt, store)
    if not belt_verdict.ok:
        raise InvalidMerge(f"belt failed validation: {belt_verdict.codes()}")
    if not core.config.accept_conflicts and plan.conflicts:
        raise InvalidMerge("core accepts only conflictless submits")
    if not state.contributors(plan.core).has(author.public_key, "content"):
        raise InvalidMerge("merge author must be a content contributor of the core")
    if core.branch_type == PROPER:
        if plan.pr is None:
            raise InvalidMerge("merging into a proper branch requires a pull request")
        if plan.pr.target_branch != plan.core or plan.pr.requesting_branch != plan.belt:
            raise InvalidMerge("pull request does not cover this merge")
        if not check_maturity(state, plan.pr):
            raise InvalidMerge("pull request is not mature")
        if not merge_ready(state, plan.pr, core.config):
            raise InvalidMerge("review requirements not met")

    base_head = rooting.stable_head
    base_submit = get_submit(store, base_head)
    new_trie = trie_mod.Trie(base_submit.trie_root, store)
    belt_trie = trie_mod.Trie(get_submit(store, belt.stable_head).trie_root, store)
    base_buckets = trie_mod.bucket_ids(new_trie)
    incoming = sorted(
        (cid for cid in trie_mod.bucket_ids(belt_trie) if cid not in base_buckets),
        key=lambda c: c.hex,
    )
    for cid in incoming:
        info = trie_mod.get(belt_trie, cid)
        new_trie = trie_mod.insert(new_trie, cid, info)
    # reverse containment for arrangements that mention buckets the core already holds
    for cid in incoming:
        bucket = store.get_object(cid)
        if not is_molecular(bucket):
            continue
        for member in arrangement_of(store, bucket):
            info = trie_mod.get(new_trie, member)
            if info is None or cid in info.bucket_refs_in:
                continue
            info = attach_info(info, InfoDelta(bucket_refs_in=(cid,)))
            new_trie = trie_mod.insert(new_trie, member, info)
    trace = SubmitTrace(
        merged_branch=plan.belt,
        belt_tip=plan.belt_tip,
        new_buckets=tuple(incoming),
    )
    merge_submit = Submit(base_head, message, new_trie.root, trace, now)

    if core.branch_type == TWIG:
        if plan.root_at != plan.core:
            raise InvalidMerge("twig merges apply to the twig head directly")
        from .review import twig_merge_vote

        counted = approvals if approvals is not None else {author.public_key}
        verdict, cid = twig_merge_vote(state, plan.core, merge_submit, counted)
        if not verdict.ok:
            raise InvalidMerge(f"twig merge rejected: {verdict.code}")
        state.add_proof(make_contribution_proof(author, plan.core, "content", cid))
    else:
        cid = store.put_object(merge_submit)
        state.add_proof(make_contribution_proof(author, plan.core, "content", cid))
    if belt.config.stale_after_merge:
        mark_stale(belt)
    return merge_submit


def mark_stale(branch: Branch) -> Branch:
    branch.stale = True
    return branch


def assert_not_stale(branch: Branch):
    if branch.stale:
        raise StaleBranch(f"branch {branch.branch_id.hex} is stale")


def apply_config_change(
    state: ProtocolState,
    branch_id: ContentId,
    new_config: BranchConfig,
    via_merge: Submit | None,
) -> Branch:
    """Swap the branch config; only a merge that already entered the branch's
    included state may carry the change, and a proper branch keeps its type."""
    branch = state.branches[branch_id]
    if via_merge is None:
        raise BranchOpError("config changes require a merge rather than a plain commit")
    merge_cid = submit_id(via_merge)
    if not via_merge.is_merge() or merge_cid not in included_submits(state.store, branch.stable_head):
        raise BranchOpError("carrying merge has not been accepted by the branch")
    if branch.config.branch_type == PROPER and new_config.branch_type != PROPER:
        raise BranchOpError("proper branches cannot change their branch type")
    branch.config = new_config
    return branch


def bucket_set(state: ProtocolState, branch_id: ContentId) -> set[ContentId]:
    """All bucket ids in the branch's current data state."""
    branch = state.branches[branch_id]
    head = get_submit(state.store, branch.stable_head)
    return trie_mod.bucket_ids(trie_mod.Trie(head.trie_root, state.store))


def submit_set(state: ProtocolState, branch_id: ContentId) -> set[ContentId]:
    """The branch's own submit chain (full ancestry, no belt closures)."""
    branch = state.branches[branch_id]
    out = set()
    cursor = branch.stable_head
    while cursor != NULL_ID:
        out.add(cursor)
        cursor = get_submit(state.store, cursor).parent
    return out
