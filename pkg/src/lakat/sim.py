"""Deterministic discrete-event peer simulator.

Peers hold independent protocol states and exchange two event kinds:
gossiped branch state (header plus the content-addressed records backing
it) and branch requests routed to contributors.  Same-tick events order by
event id, so a run is a pure function of config plus scenario.
"""

from __future__ import annotations

import hashlib
import heapq
import json
import random
from dataclasses import dataclass

from .codec import ContentId, LogicalTimestamp, canonical_decode, canonical_encode, content_id
from .identity import ContributionProof, KeyIdentity
from .branch import Branch, SelectionEntry, branch_header_from_json
from .lignify import SproutWrap
from .state import ProtocolState
from .store import MemoryStore

GOSSIP, BRANCH_REQUEST, SCENARIO_ACTION = "gossip_state", "branch_request", "scenario_action"


class SimError(Exception):
    pass


class NonQuiescent(SimError):
    """Event queue failed to drain within the allowed tick budget."""


@dataclass(frozen=True)
class SimConfig:
    rng_seed: int = 0
    latency: tuple = ("fixed", 1)  # ("fixed", k) | ("uniform", a, b)
    schedule: tuple = ()  # ((tick, peer, "join"|"leave"), ...)


@dataclass
class SimEvent:
    deliver_tick: int
    kind: str
    src: str
    dst: str
    payload: bytes
    summary: str

    @property
    def event_id(self) -> str:
        material = canonical_encode([self.deliver_tick, self.kind, self.src, self.dst, self.payload])
        return content_id(material).hex


class Peer:
    def __init__(self, name: str, identity: KeyIdentity):
        self.name = name
        self.identity = identity
        self.online = True
        self.state = ProtocolState(MemoryStore())
        self.tracked: set[ContentId] = set()
        self.last_gossiped: dict[ContentId, tuple] = {}
        self.sent_records: dict[str, int] = {}   # receiver -> store cursor already shipped
        self.sent_proofs: dict[str, set] = {}    # receiver -> proofs already shipped
        self.pending_headers: dict[str, str] = {}  # header key -> header text awaiting records

    def tracks(self, branch_id: ContentId) -> bool:
        return branch_id in self.tracked


class World:
    def __init__(self, config: SimConfig, peer_names: list[str]):
        self.config = config
        self.rng = random.Random(config.rng_seed)
        self.tick = 0
        self.seq = 0
        self.queue: list = []
        self.transcript: list[str] = []
        self.decision_log: list[str] = []
        self.peers: dict[str, Peer] = {}
        self._schedule = sorted(config.schedule, key=lambda item: (item[0], item[1]))
        self._schedule_pos = 0
        self.hosts: dict[bytes, str] = {}  # contributor public key -> hosting peer
        for name in peer_names:
            identity = KeyIdentity.from_seed(f"peer:{config.rng_seed}:{name}".encode())
            self.peers[name] = Peer(name, identity)
            self.hosts[identity.public_key] = name

    def register_host(self, public_key: bytes, peer_name: str):
        if peer_name not in self.peers:
            raise SimError(f"unknown peer {peer_name!r}")
        self.hosts[public_key] = peer_name

    # -- time --------------------------------------------------------------

    def now(self) -> LogicalTimestamp:
        return LogicalTimestamp(self.tick)

    def _latency(self) -> int:
        spec = self.config.latency
        if spec[0] == "fixed":
            return max(1, spec[1])
        if spec[0] == "uniform":
            return max(1, self.rng.randint(spec[1], spec[2]))
        raise SimError(f"unknown latency model {spec!r}")

    # -- logging -----------------------------------------------------------

    def log(self, tick: int, kind: str, src: str, dst: str, summary: str):
        self.transcript.append(f"{tick} {kind} {src} {dst} {summary}")

    def transcript_hash(self) -> str:
        return hashlib.sha256("\n".join(self.transcript).encode()).hexdigest()

    # -- event plumbing ------------------------------------------------------

    def emit(self, kind: str, src: str, dst: str, payload: bytes, summary: str):
        event = SimEvent(self.tick + self._latency(), kind, src, dst, payload, summary)
        self.seq += 1
        heapq.heappush(self.queue, (event.deliver_tick, event.event_id, self.seq, event))

    def _apply_schedule_until(self, tick: int):
        while self._schedule_pos < len(self._schedule) and self._schedule[self._schedule_pos][0] <= tick:
            at, name, action = self._schedule[self._schedule_pos]
            self._schedule_pos += 1
            peer = self.peers[name]
            if action == "leave":
                peer.online = False
                self.log(at, "schedule", name, "-", "leave")
            elif action == "join":
                peer.online = True
                self.log(at, "schedule", name, "-", "join")
                self._sync_joiner(name, at)
            else:
                raise SimError(f"unknown schedule action {action!r}")

    def _sync_joiner(self, joiner: str, at: int):
        for other in self.peers.values():
            if other.name == joiner or not other.online:
                continue
            for branch_id in sorted(other.state.branches, key=lambda c: c.hex):
                payload = build_gossip_payload(other, branch_id, full_records=True)
                event = SimEvent(at + self._latency(), GOSSIP, other.name, joiner, payload,
                                 f"sync {branch_id.hex[:10]}")
                self.seq += 1
                heapq.heappush(self.queue, (event.deliver_tick, event.event_id, self.seq, event))

    def step(self) -> bool:
        """Deliver the next queued event; False when the queue is empty."""
        if not self.queue:
            return False
        deliver_tick, _, _, event = heapq.heappop(self.queue)
        self._apply_schedule_until(deliver_tick)
        self.tick = max(self.tick, deliver_tick)
        dst = self.peers.get(event.dst)
        if dst is None or not dst.online:
            self.log(deliver_tick, event.kind, event.src, event.dst, f"dropped-offline {event.summary}")
            return True
        self.log(deliver_tick, event.kind, event.src, event.dst, event.summary)
        if event.kind == GOSSIP:
            receive_gossip(self, dst, event.payload)
        elif event.kind == BRANCH_REQUEST:
            receive_branch_request(self, dst, event.payload)
        return True

    def run_until(self, target_tick: int):
        self._apply_schedule_until(self.tick)
        while self.queue and self.queue[0][0] <= target_tick:
            self.step()
        self._apply_schedule_until(target_tick)
        self.tick = max(self.tick, target_tick)

    def run_until_quiescent(self, max_ticks: int = 10_000):
        start = self.tick
        while self.queue:
            if self.queue[0][0] > start + max_ticks:
                raise NonQuiescent(f"events still queued beyond tick {start + max_ticks}")
            self.step()
        return self

    # -- peer actions ------------------------------------------------------

    def action(self, peer_name: str, summary: str):
        """Record a scenario action executed on a peer's state."""
        self.log(self.tick, SCENARIO_ACTION, peer_name, peer_name, summary)

    def flush_gossip(self, peer_name: str):
        """Broadcast every branch whose header changed since the last flush."""
        peer = self.peers[peer_name]
        if not peer.online:
            return
        dirty = []
        for branch_id in sorted(peer.state.branches, key=lambda c: c.hex):
            print_ = peer.state.branches[branch_id].fingerprint()
            if peer.last_gossiped.get(branch_id) != print_:
                dirty.append(branch_id)
        for branch_id in dirty:
            peer.tracked.add(branch_id)
            peer.last_gossiped[branch_id] = peer.state.branches[branch_id].fingerprint()
            head = peer.state.branches[branch_id].stable_head.hex[:10]
            for other in self.peers.values():
                if other.name == peer.name or not other.online:
                    continue
                payload = build_gossip_payload(peer, branch_id, receiver=other.name)
                self.emit(GOSSIP, peer.name, other.name,
                          payload, f"branch {branch_id.hex[:10]} head {head}")


# -- gossip payloads ---------------------------------------------------------


def _tree_branch_ids(state: ProtocolState, branch_id: ContentId) -> list[ContentId]:
    """The branch plus every live sprout reachable through selections."""
    out = [branch_id]
    frontier = [branch_id]
    seen = {branch_id}
    while frontier:
        branch = state.branches.get(frontier.pop())
        if branch is None:
            continue
        for entry in branch.sprout_selection:
            if entry.sprout in seen:
                continue
            seen.add(entry.sprout)
            if entry.sprout in state.branches:
                out.append(entry.sprout)
                frontier.append(entry.sprout)
    return out


def build_gossip_payload(
    peer: Peer, branch_id: ContentId, full_records: bool = False, receiver: str | None = None
) -> bytes:
    """Branch gossip: the header (plus the headers of its live sprout tree),
    wrap records, proofs, and the records needed to replay the bundled heads.

    Records and proofs already shipped to the named receiver are skipped;
    the receiver buffers any header it cannot yet resolve, so thinning the
    payload never loses state.
    """
    state = peer.state
    tree = _tree_branch_ids(state, branch_id)
    headers = [state.branches[cid].header_text() for cid in tree]
    wraps = []
    for cid in tree:
        wrap = state.wraps.get(cid)
        if wrap is not None:
            wraps.append(wrap)
    wraps.sort(key=lambda w: w.sprout.hex)
    proofs = list(state.proofs.get(branch_id, []))
    order = state.store.ids()
    if full_records or receiver is None:
        record_ids = list(order)
    else:
        # ship the store suffix this receiver has not seen; the receiver
        # buffers headers it cannot resolve yet, so suffixes always suffice
        upto = peer.sent_records.setdefault(receiver, 0)
        record_ids = order[upto:]
        peer.sent_records[receiver] = len(order)
        shipped_proofs = peer.sent_proofs.setdefault(receiver, set())
        proofs = [p for p in proofs if p not in shipped_proofs]
        shipped_proofs.update(proofs)
    records = [state.store.get(cid) for cid in record_ids]
    ousted = sorted(((k.hex, v.hex) for k, v in state.ousted.items()))
    spent = sorted(cid.hex for cid in state.spent)
    payload = [
        b"gossip",
        branch_id,
        headers,
        wraps,
        proofs,
        records,
        [list(pair) for pair in ousted],
        spent,
    ]
    return canonical_encode(payload)


def receive_gossip(world: World, peer: Peer, payload: bytes):
    state = peer.state
    decoded = canonical_decode(payload)
    _, branch_id, headers, wraps, proofs, records, ousted, spent = decoded
    for record in records:
        state.store.put(record)
    for wrap in wraps:
        if isinstance(wrap, SproutWrap):
            state.wraps.setdefault(wrap.sprout, wrap)
    for proof in proofs:
        if isinstance(proof, ContributionProof):
            state.add_proof(proof)
    for sprout_hex, reference_hex in ousted:
        state.ousted.setdefault(ContentId.from_hex(sprout_hex), ContentId.from_hex(reference_hex))
    for cid_hex in spent:
        state.spent.add(ContentId.from_hex(cid_hex))
    changed = False
    for header_text in headers:
        adopted, resolvable = adopt_header(state, header_text)
        if adopted:
            changed = True
        if not resolvable:
            data = json.loads(header_text)
            peer.pending_headers[data["branch_id"] + data["stable_head"]] = header_text
    # new records may unlock headers buffered from earlier out-of-order gossip
    for key in list(peer.pending_headers):
        adopted, resolvable = adopt_header(state, peer.pending_headers[key])
        if adopted:
            changed = True
        if resolvable:
            del peer.pending_headers[key]
    peer.tracked.add(branch_id)
    if changed:
        world.flush_gossip(peer.name)


def _ancestry_contains(state: ProtocolState, head: ContentId, target: ContentId) -> bool:
    from .codec import NULL_ID
    from .branch import get_submit

    cursor = head
    steps = 0
    while cursor != NULL_ID and steps < 100_000:
        if cursor == target:
            return True
        if not state.store.has(cursor):
            return False
        cursor = get_submit(state.store, cursor).parent
        steps += 1
    return False


def _chain_length(state: ProtocolState, head: ContentId) -> int:
    from .codec import NULL_ID
    from .branch import get_submit

    length = 0
    cursor = head
    while cursor != NULL_ID and state.store.has(cursor):
        length += 1
        cursor = get_submit(state.store, cursor).parent
    return length


def _merge_selections(local: Branch, remote: Branch):
    by_sprout = {entry.sprout: entry for entry in local.sprout_selection}
    for entry in remote.sprout_selection:
        mine = by_sprout.get(entry.sprout)
        if mine is None:
            local.sprout_selection.append(entry)
            by_sprout[entry.sprout] = entry
            continue
        vetoes = mine.vetoes + tuple(v for v in entry.vetoes if v not in mine.vetoes)
        votes = mine.votes + tuple(v for v in entry.votes if v not in mine.votes)
        merged = SelectionEntry(entry.sprout, vetoes, votes)
        idx = local.sprout_selection.index(mine)
        local.sprout_selection[idx] = merged
        by_sprout[entry.sprout] = merged


def _chain_resolvable(state: ProtocolState, head: ContentId) -> bool:
    from .codec import NULL_ID
    from .branch import Submit, get_submit

    cursor = head
    while cursor != NULL_ID:
        if not state.store.has(cursor):
            return False
        submit = state.store.get_object(cursor)
        if not isinstance(submit, Submit):
            return False
        cursor = submit.parent
    return True


def adopt_header(state: ProtocolState, header_text: str) -> tuple[bool, bool]:
    """Join a remote branch header into the local state.

    Equal heads union their consensus entries; a remote head that extends the
    local chain is adopted wholesale; divergent twig heads resolve to the
    longer chain (then smaller head id).  Returns (changed, resolvable);
    a header whose chain records have not all arrived reports resolvable
    False so the caller can retry it later.
    """
    remote = branch_header_from_json(json.loads(header_text))
    local = state.branches.get(remote.branch_id)
    if local is None:
        if not _chain_resolvable(state, remote.stable_head):
            return False, False
        state.add_branch(remote)
        return True, True
    before = local.fingerprint()
    if local.stable_head == remote.stable_head:
        _merge_selections(local, remote)
        local.sprouts |= remote.sprouts
        for token in remote.branch_token:
            if token not in local.branch_token:
                local.branch_token.append(token)
        local.stale = local.stale or remote.stale
        if local.parent_branch.is_null() and not remote.parent_branch.is_null():
            local.parent_branch = remote.parent_branch
            local.config = remote.config
        elif local.config != remote.config:
            mine = json.dumps(local.config.to_json(), sort_keys=True)
            theirs = json.dumps(remote.config.to_json(), sort_keys=True)
            if theirs < mine:
                local.config = remote.config
    elif _ancestry_contains(state, remote.stable_head, local.stable_head):
        if not _chain_resolvable(state, remote.stable_head):
            return False, False
        _adopt_fields(local, remote)
    elif _ancestry_contains(state, local.stable_head, remote.stable_head):
        pass  # stale gossip
    else:
        if not _chain_resolvable(state, remote.stable_head):
            return False, False
        mine = (_chain_length(state, local.stable_head), local.stable_head.hex)
        theirs = (_chain_length(state, remote.stable_head), remote.stable_head.hex)
        if (theirs[0], theirs[1]) > (mine[0], mine[1]):
            _adopt_fields(local, remote)
    return local.fingerprint() != before, True


def _adopt_fields(local: Branch, remote: Branch):
    local.stable_head = remote.stable_head
    local.sprout_selection = list(remote.sprout_selection)
    local.sprouts = set(remote.sprouts)
    local.branch_token = list(remote.branch_token)
    local.config = remote.config
    local.stale = remote.stale
    if local.parent_branch.is_null() and not remote.parent_branch.is_null():
        local.parent_branch = remote.parent_branch


# -- branch requests ---------------------------------------------------------


def route_request(world: World, src_peer: str, branch_id: ContentId, channel: str, body: bytes) -> set[str]:
    """Send a branch request to every online peer hosting an identity that
    contributes to the branch (direct contributor lookup in place of DHT
    routing)."""
    sender = world.peers[src_peer]
    if branch_id not in sender.state.branches:
        world.log(world.tick, BRANCH_REQUEST, src_peer, "-", f"drop-untracked {branch_id.hex[:10]}")
        return set()
    sender.tracked.add(branch_id)
    contributors = sender.state.contributors(branch_id).all_keys()
    recipients = set()
    for key in contributors:
        host = world.hosts.get(key)
        if host is None or host == src_peer:
            continue
        if world.peers[host].online:
            recipients.add(host)
    payload = canonical_encode([b"request", branch_id, channel, body])
    for name in sorted(recipients):
        world.emit(BRANCH_REQUEST, src_peer, name, payload, f"{channel} {branch_id.hex[:10]}")
    return recipients


def receive_branch_request(world: World, peer: Peer, payload: bytes):
    _, branch_id, channel, body = canonical_decode(payload)
    verdict = peer.state.requests_for(branch_id).enqueue(channel, body)
    if not verdict.accepted:
        world.log(world.tick, BRANCH_REQUEST, peer.name, peer.name, f"rejected {channel}: {verdict.reason}")
