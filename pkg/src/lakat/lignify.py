"""Broadcasting wraps and the lignification finality walk.

Candidate merge submits are wrapped into short-lived sprout branches.  On
every new wrapped merge submit the walk descends from the proper branch
through the chain of sprouts leading to the trigger, resolving each level:
donate the winning child's head upward, convert a losing on-path child into
a peripheral proper branch, or stop while windows are still open.  A head
installed by donation is final.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from .codec import ContentId, LogicalTimestamp, NULL_ID, protocol_struct
from .identity import verify_signature
from .branch import (
    Branch,
    PROPER,
    SPROUT,
    SelectionEntry,
    Veto,
    Vote,
    compute_branch_id,
    get_submit,
)
from .state import OK, ProtocolState, Verdict


class LignificationError(Exception):
    pass


class InvalidRooting(LignificationError):
    """Merge submit's parent does not match the head it claims to extend."""


class PrematureConversion(LignificationError):
    """Sprout asked to convert before losing a contest."""


@dataclass(frozen=True)
class LignificationParams:
    broadcasting_buffer: int
    lignification_time: int
    engagement_time: int

    def __post_init__(self):
        if min(self.broadcasting_buffer, self.lignification_time, self.engagement_time) < 0:
            raise LignificationError("windows must be non-negative")

    @classmethod
    def from_config(cls, config) -> "LignificationParams":
        return cls(config.broadcasting_buffer, config.lignification_time, config.engagement_time)


@protocol_struct(20)
@dataclass(frozen=True)
class SproutWrap:
    """Registration record of a merge submit wrapped into a sprout."""

    sprout: ContentId
    merge_submit: ContentId
    rooted_at: ContentId
    creator: bytes
    created_tick: int
    requesting_branch: ContentId


def selection_owner(state: ProtocolState, core: Branch, sprout_id: ContentId) -> Branch | None:
    """The branch in core's downstream tree whose selection lists the sprout."""
    frontier = [core]
    seen = set()
    while frontier:
        branch = frontier.pop()
        if branch.branch_id in seen:
            continue
        seen.add(branch.branch_id)
        for entry in branch.sprout_selection:
            if entry.sprout == sprout_id:
                return branch
            child = state.branches.get(entry.sprout)
            if child is not None:
                frontier.append(child)
    return None


def downstream_path(state: ProtocolState, core: Branch, sprout_id: ContentId) -> list[Branch]:
    """[core, ..., sprout]: the chain of selection links from core down to
    the sprout, following current ownership."""
    owners: dict[ContentId, ContentId] = {}
    frontier = [core]
    seen = set()
    while frontier:
        branch = frontier.pop()
        if branch.branch_id in seen:
            continue
        seen.add(branch.branch_id)
        for entry in branch.sprout_selection:
            owners[entry.sprout] = branch.branch_id
            child = state.branches.get(entry.sprout)
            if child is not None:
                frontier.append(child)
    path_ids = [sprout_id]
    cursor = sprout_id
    while cursor != core.branch_id:
        owner = owners.get(cursor)
        if owner is None:
            raise LignificationError(f"branch {cursor.hex} is not in the downstream tree of the core")
        path_ids.append(owner)
        cursor = owner
    path_ids.reverse()
    return [state.branches[cid] for cid in path_ids]


def wrap_merge_in_sprout(
    state: ProtocolState,
    merge_submit: ContentId,
    creator: bytes,
    requesting_branch: ContentId,
    rooted_at: ContentId,
    now: LogicalTimestamp,
) -> SproutWrap:
    """Wrap a merge submit into a sprout rooted at the core or one of its
    live upstream sprouts; register it in the rooting branch's selection and
    the core's sprout set."""
    rooting = state.branches.get(rooted_at)
    if rooting is None:
        raise InvalidRooting(f"unknown rooting branch {rooted_at.hex}")
    submit = get_submit(state.store, merge_submit)
    if submit.parent != rooting.stable_head:
        raise InvalidRooting("merge submit parent must equal the head of the rooting branch")
    existing = compute_branch_id(NULL_ID, now, merge_submit)
    if existing in state.wraps:
        return state.wraps[existing]
    if rooting.branch_type == SPROUT:
        core = ascend_to_core(state, rooting)
        if core is None:
            raise InvalidRooting("rooting sprout is not attached to a proper branch")
        downstream_path(state, core, rooted_at)  # raises if rooting is spent/ousted
    elif rooting.branch_type == PROPER:
        core = rooting
    else:
        raise InvalidRooting("merge submits wrap onto proper branches or their sprouts")
    sprout_config = replace(core.config, branch_type=SPROUT)
    branch_id = compute_branch_id(NULL_ID, now, merge_submit)
    sprout = Branch(
        branch_id=branch_id,
        parent_branch=NULL_ID,
        timestamp=now,
        initial_head=merge_submit,
        stable_head=merge_submit,
        config=sprout_config,
    )
    state.add_branch(sprout)
    rooting.sprout_selection.append(SelectionEntry(branch_id))
    core.sprouts.add(branch_id)
    wrap = SproutWrap(branch_id, merge_submit, rooted_at, creator, now.tick, requesting_branch)
    state.store.put_object(wrap)
    state.wraps[branch_id] = wrap
    return wrap


def ascend_to_core(state: ProtocolState, branch: Branch) -> Branch | None:
    cursor = branch
    seen = set()
    while cursor.branch_type == SPROUT:
        if cursor.branch_id in seen:
            return None
        seen.add(cursor.branch_id)
        wrap = state.wraps.get(cursor.branch_id)
        if wrap is None:
            return None
        nxt = state.branches.get(wrap.rooted_at)
        if nxt is None:
            return None
        cursor = nxt
    return cursor if cursor.branch_type == PROPER else None


def _creation_tick(state: ProtocolState, sprout_id: ContentId) -> int | None:
    """Creation tick of a contending sprout; None until its branch record has
    arrived (out-of-order gossip leaves a short window where a selection
    entry is known before the sprout header resolves)."""
    branch = state.branches.get(sprout_id)
    return branch.timestamp.tick if branch is not None else None


def contest_open_tick(state: ProtocolState, branch: Branch) -> int | None:
    """Tick the contest clock opened: when the second sprout entered the
    selection.  None while fewer than two resolvable sprouts contend."""
    ticks = sorted(
        tick for tick in (_creation_tick(state, e.sprout) for e in branch.sprout_selection)
        if tick is not None
    )
    if len(ticks) < 2:
        return None
    return ticks[1]


def default_successor(state: ProtocolState, branch: Branch) -> ContentId | None:
    """Deterministic default choice: earliest created sprout, ties broken by
    smallest id."""
    known = [
        (tick, e.sprout.hex, e.sprout)
        for e in branch.sprout_selection
        for tick in (_creation_tick(state, e.sprout),)
        if tick is not None
    ]
    if not known:
        return None
    return min(known)[2]


def _window_end(open_tick: int, params: LignificationParams) -> int:
    return open_tick + params.lignification_time + params.broadcasting_buffer


def _voting_end(open_tick: int, params: LignificationParams) -> int:
    return open_tick + params.lignification_time + params.engagement_time + params.broadcasting_buffer


def register_veto(state: ProtocolState, core_id: ContentId, veto: Veto, now: LogicalTimestamp) -> Verdict:
    core = state.branches.get(core_id)
    if core is None:
        return Verdict.fail("unknown-branch")
    if not verify_signature(veto.contributor, veto.message(), veto.signature):
        return Verdict.fail("bad-signature")
    if not state.contributors(core_id).has(veto.contributor):
        return Verdict.fail("not-a-contributor")
    owner = selection_owner(state, core, veto.sprout)
    if owner is None:
        return Verdict.fail("unknown-sprout")
    open_tick = contest_open_tick(state, owner)
    if open_tick is None:
        return Verdict.fail("no-contest")
    params = LignificationParams.from_config(core.config)
    if now.tick > _window_end(open_tick, params):
        return Verdict.fail("veto-window-closed")
    entry = owner.selection_entry(veto.sprout)
    if veto not in entry.vetoes:
        idx = owner.sprout_selection.index(entry)
        owner.sprout_selection[idx] = SelectionEntry(entry.sprout, entry.vetoes + (veto,), entry.votes)
    return OK


def cast_vote(state: ProtocolState, core_id: ContentId, vote: Vote, now: LogicalTimestamp) -> Verdict:
    core = state.branches.get(core_id)
    if core is None:
        return Verdict.fail("unknown-branch")
    if not verify_signature(vote.voter, vote.message(), vote.signature):
        return Verdict.fail("bad-signature")
    if not state.contributors(core_id).has(vote.voter, "content"):
        return Verdict.fail("not-a-content-contributor")
    owner = selection_owner(state, core, vote.sprout)
    if owner is None:
        return Verdict.fail("unknown-sprout")
    if not any(entry.vetoes for entry in owner.sprout_selection):
        return Verdict.fail("no-standing-veto")
    open_tick = contest_open_tick(state, owner)
    if open_tick is None:
        return Verdict.fail("no-contest")
    params = LignificationParams.from_config(core.config)
    if now.tick > _voting_end(open_tick, params):
        return Verdict.fail("engagement-window-closed")
    entry = owner.selection_entry(vote.sprout)
    if vote not in entry.votes:
        idx = owner.sprout_selection.index(entry)
        owner.sprout_selection[idx] = SelectionEntry(entry.sprout, entry.vetoes, entry.votes + (vote,))
    return OK


def vote_winner(state: ProtocolState, branch: Branch) -> ContentId | None:
    """Plurality over the latest counted vote of each voter; ties (including
    no votes at all) fall back to the default successor."""
    latest: dict[bytes, Vote] = {}
    for entry in branch.sprout_selection:
        for vote in entry.votes:
            current = latest.get(vote.voter)
            if current is None or (vote.tick, vote.sprout.hex) > (current.tick, current.sprout.hex):
                latest[vote.voter] = vote
    tally: dict[ContentId, int] = {entry.sprout: 0 for entry in branch.sprout_selection}
    for vote in latest.values():
        if vote.sprout in tally:
            tally[vote.sprout] += 1
    if not tally:
        return None
    best = max(tally.values())
    leaders = sorted((s for s, n in tally.items() if n == best), key=lambda s: s.hex)
    if best == 0 or len(leaders) > 1:
        return default_successor(state, branch)
    return leaders[0]


def convert_sprout(state: ProtocolState, sprout_id: ContentId, reference_id: ContentId) -> Branch:
    """Turn a sprout into a peripheral proper branch rooted at the reference
    branch: fill the parent entry, flip the type, keep the config, no token."""
    sprout = state.branches[sprout_id]
    if sprout.parent_branch != NULL_ID:
        raise LignificationError("sprout parent entry already filled")
    sprout.parent_branch = reference_id
    sprout.config = replace(sprout.config, branch_type=PROPER)
    sprout.branch_token = []
    owner = None
    for branch in state.branches.values():
        entry = branch.selection_entry(sprout_id)
        if entry is not None:
            owner = branch
            break
    if owner is not None:
        owner.sprout_selection = [e for e in owner.sprout_selection if e.sprout != sprout_id]
    state.ousted.pop(sprout_id, None)
    return sprout


def finalize_ousted_sprout(
    state: ProtocolState, sprout_id: ContentId, triggering_submit: ContentId
) -> Branch:
    """Deferred conversion: an ousted sprout becomes a proper branch only
    when a transaction finally targets it."""
    sprout = state.branches.get(sprout_id)
    if sprout is None:
        raise LignificationError("unknown sprout")
    reference = state.ousted.get(sprout_id)
    if reference is None:
        raise PrematureConversion(f"sprout {sprout_id.hex} has not been ousted")
    submit = get_submit(state.store, triggering_submit)
    if submit.parent != sprout.stable_head:
        raise InvalidRooting("triggering submit does not target the sprout")
    return convert_sprout(state, sprout_id, reference)


def recompute_sprouts(state: ProtocolState, branch: Branch):
    """Prune the transitive sprout set to what the live selection tree reaches."""
    reached = set()
    frontier = list(branch.sprout_selection)
    while frontier:
        entry = frontier.pop()
        if entry.sprout in reached:
            continue
        child = state.branches.get(entry.sprout)
        if child is None or child.branch_type != SPROUT:
            continue
        reached.add(entry.sprout)
        frontier.extend(child.sprout_selection)
    branch.sprouts = reached


def lignify(
    state: ProtocolState,
    core_id: ContentId,
    new_merge_submit: ContentId,
    params: LignificationParams | None = None,
    now: LogicalTimestamp | None = None,
) -> list[str]:
    """Run the finality walk triggered by a newly wrapped merge submit.

    Returns the decision log: one `tick step branch_id action` line per
    branch taken in the walk.
    """
    core = state.branches.get(core_id)
    if core is None:
        raise LignificationError("unknown core branch")
    if params is None:
        params = LignificationParams.from_config(core.config)
    if now is None:
        raise LignificationError("current tick required")
    trigger_sprout = None
    for sprout_id, wrap in state.wraps.items():
        if wrap.merge_submit == new_merge_submit and sprout_id not in state.spent:
            trigger_sprout = sprout_id
            break
    if trigger_sprout is None:
        raise LignificationError("merge submit has not been wrapped into a sprout")
    path = downstream_path(state, core, trigger_sprout)
    log: list[str] = []
    reference = core

    def emit(step: int, branch: Branch, action: str):
        log.append(f"{now.tick} {step} {branch.branch_id.hex} {action}")

    converted: list[ContentId] = []
    for step in range(len(path) - 1):
        current = path[step]
        child = path[step + 1]
        # after a donation the level's selection lives on the reference branch
        holder = reference if current.branch_id in state.spent else current
        selection = holder.sprout_selection
        # an unresolved contender counts as still within its window
        all_within = all(
            tick is None or now.tick <= tick + params.lignification_time + params.broadcasting_buffer
            for e in selection
            for tick in (_creation_tick(state, e.sprout),)
        )
        if all_within:
            emit(step, current, "stop-windows-open")
            break
        default = default_successor(state, holder)
        vetoed = any(entry.vetoes for entry in selection)
        open_tick = contest_open_tick(state, holder)
        if vetoed and open_tick is not None:
            if now.tick > _voting_end(open_tick, params):
                winner = vote_winner(state, holder)
                if child.branch_id != winner:
                    _oust_losers(state, holder, reference, keep=winner, skip=child.branch_id)
                    convert_sprout(state, child.branch_id, reference.branch_id)
                    converted.append(child.branch_id)
                    emit(step, child, "convert-vote-loser")
                    reference = child
                else:
                    _donate(state, reference, holder, child)
                    emit(step, child, "donate-vote-winner")
            else:
                emit(step, current, "stop-voting-open")
                break
        else:
            if child.branch_id == default:
                _donate(state, reference, holder, child)
                emit(step, child, "donate-default")
            else:
                convert_sprout(state, child.branch_id, reference.branch_id)
                converted.append(child.branch_id)
                emit(step, child, "convert-side-branch")
                reference = child
    recompute_sprouts(state, core)
    for branch_id in converted:
        recompute_sprouts(state, state.branches[branch_id])
    return log


def _oust_losers(state: ProtocolState, holder: Branch, reference: Branch, keep: ContentId | None, skip: ContentId):
    """Mark decided losers at this level as ousted, rooted at the reference."""
    for entry in holder.sprout_selection:
        if entry.sprout == keep or entry.sprout == skip:
            continue
        state.ousted.setdefault(entry.sprout, reference.branch_id)


def _donate(state: ProtocolState, reference: Branch, holder: Branch, child: Branch):
    """The winning child's head, selection, and sprout set move up into the
    reference branch; rival sprouts at this level become ousted."""
    for entry in holder.sprout_selection:
        if entry.sprout != child.branch_id:
            state.ousted.setdefault(entry.sprout, reference.branch_id)
    reference.stable_head = child.stable_head
    reference.sprout_selection = list(child.sprout_selection)
    child.sprout_selection = []
    state.spent.add(child.branch_id)
