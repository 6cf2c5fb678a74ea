"""Proof-of-Review lifecycle: pull requests, commitments, review submits,
and the merge-readiness rule, plus direct twig consensus.

Everything the lifecycle needs is recoverable from branch data: the pull
request rides in a submit trace, commitments and review items ride in the
reviews trace, and reviewer identity hangs off each review bucket's creator
root.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

from .codec import ContentId, LogicalTimestamp, NULL_ID, protocol_struct
from .identity import ContributionProof, KeyIdentity, make_contribution_proof
from .bucket import InfoDelta, attach_info, arrangement_of, create_atomic_bucket, create_molecular_bucket, fresh_info
from .branch import (
    Branch,
    PullRequestTrace,
    Submit,
    SubmitTrace,
    TWIG,
    get_submit,
    included_submits,
)
from .state import OK, ProtocolState, Verdict
from .store import MissingRecord
from . import trie as trie_mod

PR_STATUSES = ("created", "mature", "under_review", "complete")


@protocol_struct(15)
@dataclass(frozen=True)
class ReviewCommitment:
    """A target-branch content contributor's signed intent to review."""

    commitment_proof: ContributionProof
    requesting_branch: ContentId
    timestamp: LogicalTimestamp


@protocol_struct(16)
@dataclass(frozen=True)
class ReviewItem:
    """One review: the review-text bucket, what it reviewed, and a verdict."""

    bucket: ContentId
    reviewed_buckets: tuple
    verdict: str  # "accept" | "reject" | "comment"
    round: int

    def __post_init__(self):
        if isinstance(self.reviewed_buckets, list):
            object.__setattr__(self, "reviewed_buckets", tuple(self.reviewed_buckets))


@dataclass
class PullRequest:
    issuing_branch: ContentId
    requesting_branch: ContentId
    target_branch: ContentId
    review_container: ContentId
    carrier_submit: ContentId
    status: str = "created"


class AuthorizationError(Exception):
    pass


def twig_push(state: ProtocolState, twig_id: ContentId, submit: Submit, author: bytes) -> tuple[Verdict, ContentId | None]:
    """Direct push: content and review contributors only, with one exception:
    a submit whose reviews trace consists of valid commitments by the author
    may enter on the strength of those commitments alone."""
    branch = state.branches.get(twig_id)
    if branch is None:
        return Verdict.fail("unknown-branch"), None
    if branch.branch_type != TWIG:
        return Verdict.fail("not-a-twig", branch.branch_type), None
    contributors = state.contributors(twig_id)
    allowed = contributors.has(author, "content") or contributors.has(author, "review")
    if not allowed and _is_commitment_carrier(state, submit, author):
        allowed = True
    if not allowed:
        return Verdict.fail("not-a-contributor"), None
    return state.append_submit(twig_id, submit)


def _is_commitment_carrier(state: ProtocolState, submit: Submit, author: bytes) -> bool:
    trace = submit.submit_trace
    if not trace.reviews_trace or trace.new_buckets:
        return False
    for cid in trace.reviews_trace:
        try:
            record = state.store.get_object(cid)
        except MissingRecord:
            return False
        if not isinstance(record, ReviewCommitment):
            return False
        if record.commitment_proof.contributor != author:
            return False
        if not record.commitment_proof.verify():
            return False
    return True


def twig_merge_vote(
    state: ProtocolState,
    twig_id: ContentId,
    merge_submit: Submit,
    approvals: set[bytes],
) -> tuple[Verdict, ContentId | None]:
    """Apply a merge submit to a twig when enough content contributors agree."""
    branch = state.branches.get(twig_id)
    if branch is None:
        return Verdict.fail("unknown-branch"), None
    if branch.branch_type != TWIG:
        return Verdict.fail("not-a-twig"), None
    content_keys = state.contributors(twig_id).keys("content")
    if not content_keys:
        return Verdict.fail("no-content-contributors"), None
    counted = approvals & content_keys
    needed = branch.config.twig_merge_fraction.value()
    if Fraction(len(counted), len(content_keys)) < needed:
        return Verdict.fail("insufficient-approvals", f"{len(counted)}/{len(content_keys)}"), None
    return state.append_submit(twig_id, merge_submit)


def create_pull_request(
    state: ProtocolState,
    issuing_id: ContentId,
    requesting_id: ContentId,
    target_id: ContentId,
    author: KeyIdentity,
    now: LogicalTimestamp,
) -> tuple[PullRequest, Submit]:
    """Open the review process: a submit on the issuing branch carrying a
    fresh review container and the pull-request trace."""
    issuing = state.branches[issuing_id]
    if not state.contributors(issuing_id).has(author.public_key, "content"):
        raise AuthorizationError("pull request author must be a content contributor of the issuing branch")
    store = state.store
    creator_root = store.put(author.public_key)
    _, container_id = create_molecular_bucket(store, creator_root, NULL_ID, [], now)
    base_trie = trie_mod.Trie(get_submit(store, issuing.stable_head).trie_root, store)
    new_trie = trie_mod.insert(base_trie, container_id, fresh_info([]))
    trace = SubmitTrace(
        pull_requests=(PullRequestTrace(container_id, target_id, requesting_id),),
        new_buckets=(container_id,),
    )
    submit = Submit(issuing.stable_head, "pull request", new_trie.root, trace, now)
    verdict, carrier = twig_push(state, issuing_id, submit, author.public_key)
    if not verdict.ok:
        raise AuthorizationError(f"pull request push rejected: {verdict.code}")
    state.add_proof(make_contribution_proof(author, issuing_id, "content", carrier))
    pr = PullRequest(issuing_id, requesting_id, target_id, container_id, carrier)
    pr.status = "mature" if check_maturity(state, pr) else "created"
    return pr, submit


def check_maturity(state: ProtocolState, pr: PullRequest) -> bool:
    """A pull request matures once its carrier submit is included in the
    requesting branch (directly or through a merge's belt closure)."""
    requesting = state.branches.get(pr.requesting_branch)
    if requesting is None:
        return False
    return pr.carrier_submit in included_submits(state.store, requesting.stable_head)


def own_submits(state: ProtocolState, branch: Branch) -> list[Submit]:
    """The branch's own submits, head back to (and excluding) its root: the
    range where its commitments, review items, and offered content live."""
    out = []
    cursor = branch.stable_head
    while cursor != NULL_ID:
        submit = get_submit(state.store, cursor)
        out.append(submit)
        if cursor == branch.initial_head:
            break
        cursor = submit.parent
    return out


def _trace_records(state: ProtocolState, branch: Branch):
    for submit in own_submits(state, branch):
        for cid in submit.submit_trace.reviews_trace:
            try:
                yield cid, state.store.get_object(cid)
            except MissingRecord:
                continue


def commitments_for(state: ProtocolState, pr: PullRequest) -> dict[bytes, ReviewCommitment]:
    """Committed reviewers of the pull request's requesting branch."""
    requesting = state.branches[pr.requesting_branch]
    found: dict[bytes, ReviewCommitment] = {}
    for _, record in _trace_records(state, requesting):
        if not isinstance(record, ReviewCommitment):
            continue
        if record.requesting_branch != pr.requesting_branch:
            continue
        if record.commitment_proof.branch_id != pr.target_branch:
            continue
        found.setdefault(record.commitment_proof.contributor, record)
    return found


def commit_review(
    state: ProtocolState,
    pr: PullRequest,
    committer: KeyIdentity,
    now: LogicalTimestamp,
) -> Verdict:
    """Record a review commitment, making the committer a review contributor
    of the requesting branch."""
    if not check_maturity(state, pr):
        return Verdict.fail("immature-pull-request")
    target_contributors = state.contributors(pr.target_branch)
    entry = target_contributors.content.get(committer.public_key)
    if entry is None:
        return Verdict.fail("not-target-content-contributor")
    if state.contributors(pr.requesting_branch).has(committer.public_key):
        return Verdict.fail("conflict-of-interest")
    if not entry:
        # union-derived contributor without a direct proof cannot re-attest
        return Verdict.fail("no-citable-evidence")
    proof = make_contribution_proof(committer, pr.target_branch, "content", entry[0].evidence)
    commitment = ReviewCommitment(proof, pr.requesting_branch, now)
    commitment_id = state.store.put_object(commitment)
    requesting = state.branches[pr.requesting_branch]
    trace = SubmitTrace(reviews_trace=(commitment_id,))
    submit = Submit(requesting.stable_head, "review commitment", get_submit(state.store, requesting.stable_head).trie_root, trace, now)
    verdict, _ = twig_push(state, pr.requesting_branch, submit, committer.public_key)
    if not verdict.ok:
        return verdict
    state.add_proof(make_contribution_proof(committer, pr.requesting_branch, "review", commitment_id))
    pr.status = "under_review"
    return OK


def container_chain(state: ProtocolState, pr: PullRequest) -> list[ContentId]:
    """Versions of the review container, oldest first, following bucket
    parent links from the original container."""
    requesting = state.branches[pr.requesting_branch]
    by_parent: dict[ContentId, ContentId] = {}
    for submit in own_submits(state, requesting):
        for cid in submit.submit_trace.new_buckets:
            try:
                bucket = state.store.get_object(cid)
            except MissingRecord:
                continue
            if getattr(bucket, "parent", None) is not None and bucket.parent != NULL_ID:
                by_parent[bucket.parent] = cid
    chain = [pr.review_container]
    while chain[-1] in by_parent:
        chain.append(by_parent[chain[-1]])
    return chain


def review_items_for(state: ProtocolState, pr: PullRequest) -> list[tuple[bytes, ReviewItem]]:
    """(reviewer, item) pairs referenced from the review container, in
    submission order."""
    container_head = container_chain(state, pr)[-1]
    container = state.store.get_object(container_head)
    referenced = set(arrangement_of(state.store, container))
    requesting = state.branches[pr.requesting_branch]
    out = []
    history = own_submits(state, requesting)
    for submit in reversed(history):
        for cid in submit.submit_trace.reviews_trace:
            try:
                record = state.store.get_object(cid)
            except MissingRecord:
                continue
            if not isinstance(record, ReviewItem) or record.bucket not in referenced:
                continue
            review_bucket = state.store.get_object(record.bucket)
            reviewer = bytes(state.store.get(review_bucket.creator_root))
            out.append((reviewer, record))
    return out


def submit_review(
    state: ProtocolState,
    pr: PullRequest,
    reviewer: KeyIdentity,
    verdict: str,
    text: bytes,
    now: LogicalTimestamp,
    reviewed_buckets: list[ContentId] | None = None,
    update_of: ContentId | None = None,
) -> tuple[Verdict, ReviewItem | None]:
    """Push a review submit: a review bucket, a new container version holding
    it, the reviewed buckets' info gaining the review reference."""
    committed = commitments_for(state, pr)
    if reviewer.public_key not in committed:
        return Verdict.fail("no-commitment"), None
    if verdict not in ("accept", "reject", "comment"):
        return Verdict.fail("bad-verdict", verdict), None
    store = state.store
    requesting = state.branches[pr.requesting_branch]
    if reviewed_buckets is None:
        reviewed_buckets = default_review_scope(state, pr)
    for cid in reviewed_buckets:
        if not store.has(cid):
            return Verdict.fail("dangling-reviewed-bucket", cid.hex), None
    creator_root = store.put(reviewer.public_key)
    parent_bucket = update_of if update_of is not None else NULL_ID
    _, review_bucket_id = create_atomic_bucket(store, creator_root, parent_bucket, text, [], now)
    prior_items = [item for who, item in review_items_for(state, pr) if who == reviewer.public_key]
    item = ReviewItem(review_bucket_id, tuple(reviewed_buckets), verdict, len(prior_items) + 1)
    item_id = store.put_object(item)

    chain = container_chain(state, pr)
    container_head = chain[-1]
    old_container = store.get_object(container_head)
    arrangement = arrangement_of(store, old_container) + [review_bucket_id]
    _, new_container_id = create_molecular_bucket(store, creator_root, container_head, arrangement, now)

    base_trie = trie_mod.Trie(get_submit(store, requesting.stable_head).trie_root, store)
    new_trie = trie_mod.insert(base_trie, review_bucket_id, fresh_info([]))
    new_trie = trie_mod.insert(new_trie, new_container_id, fresh_info(arrangement))
    for member in arrangement:
        info = trie_mod.get(new_trie, member)
        if info is None:
            continue
        if new_container_id not in info.bucket_refs_in:
            info = attach_info(info, InfoDelta(bucket_refs_in=(new_container_id,)))
            new_trie = trie_mod.insert(new_trie, member, info)
    for reviewed in reviewed_buckets:
        info = trie_mod.get(new_trie, reviewed)
        if info is None:
            continue
        if review_bucket_id not in info.reviews:
            info = attach_info(info, InfoDelta(reviews=(review_bucket_id,)))
            new_trie = trie_mod.insert(new_trie, reviewed, info)
    trace = SubmitTrace(reviews_trace=(item_id,), new_buckets=(review_bucket_id, new_container_id))
    submit = Submit(requesting.stable_head, f"review: {verdict}", new_trie.root, trace, now)
    push_verdict, carrier = twig_push(state, pr.requesting_branch, submit, reviewer.public_key)
    if not push_verdict.ok:
        return push_verdict, None
    state.add_proof(make_contribution_proof(reviewer, pr.requesting_branch, "review", item_id))
    return OK, item


def default_review_scope(state: ProtocolState, pr: PullRequest) -> list[ContentId]:
    """Content buckets the requesting branch itself introduced, excluding
    review machinery (container versions and review buckets)."""
    requesting = state.branches[pr.requesting_branch]
    skip = set(container_chain(state, pr))
    reviewed = []
    for submit in reversed(own_submits(state, requesting)):
        if submit.submit_trace.reviews_trace:
            continue
        for cid in submit.submit_trace.new_buckets:
            if cid not in skip and cid not in reviewed:
                reviewed.append(cid)
    return reviewed


def merge_ready(state: ProtocolState, pr: PullRequest, target_config) -> bool:
    """True once reviewer count, completed rounds, and the acceptance rule
    are all simultaneously satisfied."""
    committed = commitments_for(state, pr)
    if not committed:
        return False
    items = review_items_for(state, pr)
    per_reviewer: dict[bytes, list[ReviewItem]] = {key: [] for key in committed}
    for reviewer, item in items:
        if reviewer in per_reviewer:
            per_reviewer[reviewer].append(item)
    with_items = {key for key, lst in per_reviewer.items() if lst}
    if len(with_items) < target_config.min_reviewers:
        return False
    completed_rounds = min(len(lst) for lst in per_reviewer.values())
    if completed_rounds < target_config.min_review_rounds:
        return False
    rejects = sum(1 for key in with_items if per_reviewer[key][-1].verdict == "reject")
    if not target_config.acceptance_rule.satisfied(len(with_items), rejects):
        return False
    pr.status = "complete"
    return True


def pr_status(state: ProtocolState, pr: PullRequest, target_config) -> str:
    if merge_ready(state, pr, target_config):
        return "complete"
    if commitments_for(state, pr):
        return "under_review"
    if check_maturity(state, pr):
        return "mature"
    return "created"
