"""Scenario parsing and execution: a JSON script drives the simulator.

Directives run on the acting peer's state, gossip flows between steps as
the script advances ticks, and `expect` directives assert on the resulting
world in-run.  Reports are byte-stable for a fixed scenario and seed.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

from .codec import ContentId, canonical_encode
from .identity import KeyIdentity
from .branch import (
    BranchConfig,
    PROPER,
    TWIG,
    Veto,
    Vote,
    branch_header_from_json,
    get_submit,
    submit_id,
    verify_branch,
)
from .lignify import lignify, register_veto, cast_vote, wrap_merge_in_sprout
from .ops import create_genesis_branch, create_rooted_branch, execute_merge, plan_merge
from .review import PullRequest, commit_review, create_pull_request, submit_review
from .sim import SimConfig, World, route_request
from .state import build_content_submit
from .store import MemoryStore
from .review import twig_push
from .identity import make_contribution_proof
from . import trie as trie_mod

DIRECTIVES = (
    "create_branch",
    "submit",
    "pull_request",
    "commit_review",
    "review",
    "merge",
    "veto",
    "vote",
    "advance_ticks",
    "expect",
)


class ScenarioError(Exception):
    """Malformed scenario: unknown directive, undeclared name, bad field."""


@dataclass
class Scenario:
    sim: SimConfig
    peers: list
    actors: list  # (name, peer)
    steps: list
    source: dict


@dataclass
class RunReport:
    transcript_hash: str = ""
    headers: dict = field(default_factory=dict)
    decision_log: list = field(default_factory=list)
    assertions: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(entry["ok"] for entry in self.assertions)

    def to_json(self) -> dict:
        return {
            "transcript_hash": self.transcript_hash,
            "headers": self.headers,
            "decision_log": self.decision_log,
            "assertions": self.assertions,
            "ok": self.ok,
        }


def _need(step: dict, index: int, *keys):
    for key in keys:
        if key not in step:
            raise ScenarioError(f"step {index}: directive {step.get('op')!r} is missing field {key!r}")


def parse_scenario(text: str) -> Scenario:
    """Validate structure and name discipline before anything runs."""
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise ScenarioError("scenario must be a JSON object")
    sim_spec = data.get("sim", {})
    peers = list(sim_spec.get("peers", []))
    if len(set(peers)) != len(peers):
        raise ScenarioError("duplicate peer names")
    latency_spec = sim_spec.get("latency", {"fixed": 1})
    if "fixed" in latency_spec:
        latency = ("fixed", int(latency_spec["fixed"]))
    elif "uniform" in latency_spec:
        low, high = latency_spec["uniform"]
        latency = ("uniform", int(low), int(high))
    else:
        raise ScenarioError("latency must be {'fixed': k} or {'uniform': [a, b]}")
    schedule = tuple(
        (int(item["tick"]), item["peer"], item["action"]) for item in sim_spec.get("schedule", ())
    )
    for _, peer, action in schedule:
        if peer not in peers:
            raise ScenarioError(f"schedule references undeclared peer {peer!r}")
        if action not in ("join", "leave"):
            raise ScenarioError(f"schedule action must be join or leave, not {action!r}")
    sim = SimConfig(int(sim_spec.get("seed", 0)), latency, schedule)
    actors = []
    actor_names = set()
    for entry in data.get("actors", []):
        name, peer = entry["name"], entry["peer"]
        if peer not in peers:
            raise ScenarioError(f"actor {name!r} assigned to undeclared peer {peer!r}")
        if name in actor_names:
            raise ScenarioError(f"duplicate actor {name!r}")
        actor_names.add(name)
        actors.append((name, peer))
    steps = data.get("steps", [])
    branch_names, pr_names, sprout_names = set(), set(), set()

    def check_actor(step, index, key="author"):
        if step[key] not in actor_names:
            raise ScenarioError(f"step {index}: undeclared actor {step[key]!r}")

    def check_branch(step, index, key):
        if step[key] not in branch_names and step[key] not in sprout_names:
            raise ScenarioError(f"step {index}: undeclared branch {step[key]!r}")

    for index, step in enumerate(steps):
        op = step.get("op")
        if op not in DIRECTIVES:
            raise ScenarioError(f"step {index}: unknown directive {op!r}")
        if op == "create_branch":
            _need(step, index, "name", "creator", "type")
            check_actor(step, index, "creator")
            if step["type"] not in (TWIG, PROPER):
                raise ScenarioError(f"step {index}: branch type must be twig or proper")
            if step.get("parent") is not None:
                check_branch(step, index, "parent")
            if step["name"] in branch_names:
                raise ScenarioError(f"step {index}: duplicate branch name {step['name']!r}")
            branch_names.add(step["name"])
        elif op == "submit":
            _need(step, index, "branch", "author", "payload")
            check_actor(step, index)
            check_branch(step, index, "branch")
        elif op == "pull_request":
            _need(step, index, "name", "issuing", "requesting", "target", "author")
            check_actor(step, index)
            for key in ("issuing", "requesting", "target"):
                check_branch(step, index, key)
            if step["name"] in pr_names:
                raise ScenarioError(f"step {index}: duplicate pull request name {step['name']!r}")
            pr_names.add(step["name"])
        elif op == "commit_review":
            _need(step, index, "pr", "reviewer")
            check_actor(step, index, "reviewer")
            if step["pr"] not in pr_names:
                raise ScenarioError(f"step {index}: undeclared pull request {step['pr']!r}")
        elif op == "review":
            _need(step, index, "pr", "reviewer", "verdict")
            check_actor(step, index, "reviewer")
            if step["pr"] not in pr_names:
                raise ScenarioError(f"step {index}: undeclared pull request {step['pr']!r}")
        elif op == "merge":
            _need(step, index, "core", "belt", "author")
            check_actor(step, index)
            check_branch(step, index, "core")
            check_branch(step, index, "belt")
            if step.get("pr") is not None and step["pr"] not in pr_names:
                raise ScenarioError(f"step {index}: undeclared pull request {step['pr']!r}")
            if step.get("root_at") is not None:
                check_branch(step, index, "root_at")
            for approver in step.get("approvals", ()):
                if approver not in actor_names:
                    raise ScenarioError(f"step {index}: undeclared actor {approver!r}")
            if step.get("as"):
                if step["as"] in sprout_names:
                    raise ScenarioError(f"step {index}: duplicate sprout name {step['as']!r}")
                sprout_names.add(step["as"])
        elif op in ("veto", "vote"):
            _need(step, index, "core", "sprout", "by")
            check_actor(step, index, "by")
            check_branch(step, index, "core")
            if step["sprout"] not in sprout_names:
                raise ScenarioError(f"step {index}: undeclared sprout {step['sprout']!r}")
        elif op == "advance_ticks":
            _need(step, index, "ticks")
        elif op == "expect":
            _need(step, index, "that")
    return Scenario(sim, peers, actors, steps, data)


class Runner:
    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        self.world = World(scenario.sim, scenario.peers)
        self.actors: dict[str, tuple[KeyIdentity, str]] = {}
        for name, peer in scenario.actors:
            identity = KeyIdentity.from_seed(f"actor:{scenario.sim.rng_seed}:{name}".encode())
            self.actors[name] = (identity, peer)
            self.world.register_host(identity.public_key, peer)
        self.branches: dict[str, tuple[ContentId, str]] = {}  # name -> (id, home peer)
        self.prs: dict[str, dict] = {}  # name -> pull request fields
        self.sprouts: dict[str, tuple[ContentId, ContentId]] = {}  # name -> (sprout id, merge submit)
        self.report = RunReport()

    # -- helpers -----------------------------------------------------------

    def _actor(self, name: str) -> tuple[KeyIdentity, str]:
        return self.actors[name]

    def _branch_id(self, name: str) -> ContentId:
        if name in self.branches:
            return self.branches[name][0]
        if name in self.sprouts:
            return self.sprouts[name][0]
        raise ScenarioError(f"unknown branch name {name!r}")

    def _pr(self, pr_name: str) -> PullRequest:
        fields = self.prs[pr_name]
        return PullRequest(
            fields["issuing"], fields["requesting"], fields["target"],
            fields["container"], fields["carrier"],
        )

    def _state(self, peer_name: str):
        return self.world.peers[peer_name].state

    # -- directive execution -------------------------------------------------

    def run(self, max_quiescence_ticks: int = 100_000) -> RunReport:
        world = self.world
        for index, step in enumerate(self.scenario.steps):
            op = step["op"]
            handler = getattr(self, f"_op_{op}")
            handler(index, step)
        world.run_until_quiescent(max_quiescence_ticks)
        self.report.transcript_hash = world.transcript_hash()
        self.report.decision_log = list(world.decision_log)
        headers = {}
        for peer_name, peer in world.peers.items():
            headers[peer_name] = {
                bid.hex: peer.state.branches[bid].header_json()
                for bid in sorted(peer.state.branches, key=lambda c: c.hex)
            }
        self.report.headers = headers
        return self.report

    def _op_create_branch(self, index, step):
        creator, peer_name = self._actor(step["creator"])
        state = self._state(peer_name)
        overrides = dict(step.get("config", {}))
        overrides["branch_type"] = step["type"]
        base = BranchConfig().to_json()
        base.update(overrides)
        config = BranchConfig.from_json(base)
        token = bytes.fromhex(step["token"]) if step.get("token") else None
        if step.get("parent") is None:
            branch = create_genesis_branch(state, config, creator, self.world.now(), token)
        else:
            parent_id = self._branch_id(step["parent"])
            parent = state.branches[parent_id]
            branch = create_rooted_branch(
                state, parent.stable_head, parent_id, creator, self.world.now(), config
            )
        self.branches[step["name"]] = (branch.branch_id, peer_name)
        self.world.peers[peer_name].tracked.add(branch.branch_id)
        self.world.action(peer_name, f"create_branch {step['name']} {branch.branch_id.hex[:10]}")
        route_request(self.world, peer_name, branch.branch_id, "branch_creation_broadcast",
                      branch.branch_id.hex.encode())
        self.world.flush_gossip(peer_name)

    def _op_submit(self, index, step):
        author, peer_name = self._actor(step["author"])
        state = self._state(peer_name)
        branch_id = self._branch_id(step["branch"])
        branch = state.branches[branch_id]
        payload = step["payload"].encode()
        submit = build_content_submit(
            state, branch, author, step.get("message", "submit"), self.world.now(), [payload]
        )
        verdict, cid = twig_push(state, branch_id, submit, author.public_key)
        if not verdict.ok:
            raise ScenarioError(f"step {index}: submit rejected: {verdict.code}")
        state.add_proof(make_contribution_proof(author, branch_id, "content", cid))
        self.world.action(peer_name, f"submit {step['branch']} {cid.hex[:10]}")
        route_request(self.world, peer_name, branch_id, "submit_requests", cid.hex.encode())
        self.world.flush_gossip(peer_name)

    def _op_pull_request(self, index, step):
        author, peer_name = self._actor(step["author"])
        state = self._state(peer_name)
        issuing = self._branch_id(step["issuing"])
        requesting = self._branch_id(step["requesting"])
        target = self._branch_id(step["target"])
        pr, submit = create_pull_request(state, issuing, requesting, target, author, self.world.now())
        self.prs[step["name"]] = {
            "issuing": issuing,
            "requesting": requesting,
            "target": target,
            "container": pr.review_container,
            "carrier": pr.carrier_submit,
        }
        self.world.action(peer_name, f"pull_request {step['name']} {pr.review_container.hex[:10]}")
        route_request(self.world, peer_name, target, "pull_requests", pr.review_container.hex.encode())
        self.world.flush_gossip(peer_name)

    def _op_commit_review(self, index, step):
        reviewer, peer_name = self._actor(step["reviewer"])
        state = self._state(peer_name)
        pr = self._pr(step["pr"])
        # consume the routed notification if it is waiting in the channel
        state.requests_for(pr.target_branch).dequeue("pull_requests")
        verdict = commit_review(state, pr, reviewer, self.world.now())
        if not verdict.ok:
            raise ScenarioError(f"step {index}: commit_review rejected: {verdict.code}")
        self.world.action(peer_name, f"commit_review {step['pr']} by {step['reviewer']}")
        self.world.flush_gossip(peer_name)

    def _op_review(self, index, step):
        reviewer, peer_name = self._actor(step["reviewer"])
        state = self._state(peer_name)
        pr = self._pr(step["pr"])
        text = step.get("text", "").encode()
        verdict, _ = submit_review(state, pr, reviewer, step["verdict"], text, self.world.now())
        if not verdict.ok:
            raise ScenarioError(f"step {index}: review rejected: {verdict.code}")
        self.world.action(peer_name, f"review {step['pr']} {step['verdict']} by {step['reviewer']}")
        self.world.flush_gossip(peer_name)

    def _op_merge(self, index, step):
        author, peer_name = self._actor(step["author"])
        state = self._state(peer_name)
        core_id = self._branch_id(step["core"])
        belt_id = self._branch_id(step["belt"])
        pr = self._pr(step["pr"]) if step.get("pr") else None
        root_at = self._branch_id(step["root_at"]) if step.get("root_at") else core_id
        approvals = None
        if step.get("approvals"):
            approvals = {self._actor(name)[0].public_key for name in step["approvals"]}
        plan = plan_merge(state, core_id, belt_id, pr, root_at)
        merge_submit = execute_merge(state, plan, author, self.world.now(), approvals)
        cid = submit_id(merge_submit)
        core = state.branches[core_id]
        summary = f"merge {step['belt']} into {step['core']} submit {cid.hex[:10]}"
        if core.branch_type == PROPER:
            wrap = wrap_merge_in_sprout(
                state, cid, author.public_key, belt_id, root_at, self.world.now()
            )
            if step.get("as"):
                self.sprouts[step["as"]] = (wrap.sprout, cid)
            lines = lignify(state, core_id, cid, now=self.world.now())
            self.world.decision_log.extend(lines)
            summary += f" sprout {wrap.sprout.hex[:10]}"
        self.world.action(peer_name, summary)
        route_request(self.world, peer_name, core_id, "submit_requests", cid.hex.encode())
        self.world.flush_gossip(peer_name)

    def _op_veto(self, index, step):
        actor, peer_name = self._actor(step["by"])
        state = self._state(peer_name)
        core_id = self._branch_id(step["core"])
        sprout_id = self.sprouts[step["sprout"]][0]
        tick = self.world.tick
        message = canonical_encode([b"veto", sprout_id, actor.public_key, tick])
        veto = Veto(sprout_id, actor.public_key, tick, actor.sign(message))
        verdict = register_veto(state, core_id, veto, self.world.now())
        if not verdict.ok:
            raise ScenarioError(f"step {index}: veto rejected: {verdict.code}")
        self.world.action(peer_name, f"veto {step['sprout']} by {step['by']}")
        self.world.flush_gossip(peer_name)

    def _op_vote(self, index, step):
        actor, peer_name = self._actor(step["by"])
        state = self._state(peer_name)
        core_id = self._branch_id(step["core"])
        sprout_id = self.sprouts[step["sprout"]][0]
        tick = self.world.tick
        message = canonical_encode([b"vote", sprout_id, actor.public_key, tick])
        vote = Vote(sprout_id, actor.public_key, tick, actor.sign(message))
        verdict = cast_vote(state, core_id, vote, self.world.now())
        if not verdict.ok:
            raise ScenarioError(f"step {index}: vote rejected: {verdict.code}")
        self.world.action(peer_name, f"vote {step['sprout']} by {step['by']}")
        self.world.flush_gossip(peer_name)

    def _op_advance_ticks(self, index, step):
        self.world.run_until(self.world.tick + int(step["ticks"]))

    def _op_expect(self, index, step):
        that = step["that"]
        ok, detail = self._evaluate_expect(step)
        self.report.assertions.append({"step": index, "that": that, "ok": ok, "detail": detail})

    def _evaluate_expect(self, step) -> tuple[bool, str]:
        that = step["that"]
        if that == "stable_head":
            branch_id = self._branch_id(step["branch"])
            state = self._home_state(step["branch"])
            head = state.branches[branch_id].stable_head
            expected = self.sprouts[step["equals_sprout_head"]][1]
            return head == expected, f"head={head.hex[:12]} expected={expected.hex[:12]}"
        if that == "branch_rooted":
            branch_id = self._branch_id(step["branch"])
            state = self._home_state(step["branch"])
            branch = state.branches[branch_id]
            parent_id = self._branch_id(step["parent"])
            ok = branch.parent_branch == parent_id and branch.branch_type == step.get("branch_type", PROPER)
            return ok, f"parent={branch.parent_branch.hex[:12]} type={branch.branch_type}"
        if that == "headers_converged":
            branch_id = self._branch_id(step["branch"])
            texts = set()
            for peer in self.world.peers.values():
                if not peer.online:
                    continue
                branch = peer.state.branches.get(branch_id)
                if branch is None:
                    return False, f"{peer.name} does not know the branch"
                texts.add(branch.header_text())
            return len(texts) == 1, f"{len(texts)} distinct headers"
        if that == "contributor":
            branch_id = self._branch_id(step["branch"])
            state = self._home_state(step["branch"])
            identity, _ = self._actor(step["actor"])
            present = state.contributors(branch_id).has(identity.public_key, step.get("kind"))
            return present == step.get("present", True), f"present={present}"
        if that == "bucket_count":
            branch_id = self._branch_id(step["branch"])
            state = self._home_state(step["branch"])
            head = get_submit(state.store, state.branches[branch_id].stable_head)
            count = len(trie_mod.bucket_ids(trie_mod.Trie(head.trie_root, state.store)))
            return count == step["equals"], f"count={count}"
        if that == "branch_verifies":
            branch_id = self._branch_id(step["branch"])
            state = self._home_state(step["branch"])
            verdict = verify_branch(state.branches[branch_id], state.store)
            return verdict.ok, f"failures={verdict.codes()}"
        if that == "quiescent":
            return not self.world.queue, f"queued={len(self.world.queue)}"
        raise ScenarioError(f"unknown expectation {that!r}")

    def _home_state(self, branch_name: str):
        if branch_name in self.branches:
            return self._state(self.branches[branch_name][1])
        # sprouts live on the peer that wrapped them; fall back to first peer
        return self._state(next(iter(self.world.peers)))


def run(scenario: Scenario) -> RunReport:
    return Runner(scenario).run()


def dump_state(world: World, path: str):
    """Write branch headers, the bucket store index, and trie roots per peer."""
    os.makedirs(path, exist_ok=True)
    for name, peer in world.peers.items():
        peer_dir = os.path.join(path, name)
        os.makedirs(peer_dir, exist_ok=True)
        headers = {
            bid.hex: peer.state.branches[bid].header_json()
            for bid in sorted(peer.state.branches, key=lambda c: c.hex)
        }
        with open(os.path.join(peer_dir, "headers.json"), "w") as fh:
            json.dump(headers, fh, sort_keys=True, indent=1)
        with open(os.path.join(peer_dir, "store.log"), "w") as fh:
            for cid in peer.state.store.ids():
                fh.write(f"{cid.hex} {peer.state.store.get(cid).hex()}\n")
        roots = {}
        for bid in sorted(peer.state.branches, key=lambda c: c.hex):
            branch = peer.state.branches[bid]
            try:
                head = get_submit(peer.state.store, branch.stable_head)
                roots[bid.hex] = head.trie_root.hex
            except Exception:
                roots[bid.hex] = None
        with open(os.path.join(peer_dir, "trie_roots.json"), "w") as fh:
            json.dump(roots, fh, sort_keys=True, indent=1)


def verify_dump(path: str) -> list[str]:
    """Re-check integrity of a dumped world; returns a list of problems."""
    problems = []
    if not os.path.isdir(path):
        return [f"not a dump directory: {path}"]
    from .codec import content_id

    for name in sorted(os.listdir(path)):
        peer_dir = os.path.join(path, name)
        if not os.path.isdir(peer_dir):
            continue
        store = MemoryStore()
        log_path = os.path.join(peer_dir, "store.log")
        if os.path.exists(log_path):
            with open(log_path) as fh:
                for line_no, line in enumerate(fh, 1):
                    hex_id, hex_bytes = line.strip().split(" ", 1)
                    data = bytes.fromhex(hex_bytes)
                    if content_id(data).hex != hex_id:
                        problems.append(f"{name}: store.log line {line_no} id mismatch")
                    store.put(data)
        headers_path = os.path.join(peer_dir, "headers.json")
        if not os.path.exists(headers_path):
            continue
        with open(headers_path) as fh:
            headers = json.load(fh)
        roots_path = os.path.join(peer_dir, "trie_roots.json")
        roots = {}
        if os.path.exists(roots_path):
            with open(roots_path) as fh:
                roots = json.load(fh)
        for bid_hex, header in headers.items():
            branch = branch_header_from_json(header)
            verdict = verify_branch(branch, store)
            if not verdict.ok:
                problems.append(f"{name}: branch {bid_hex[:12]} fails: {verdict.codes()}")
            expected_root = roots.get(bid_hex)
            if expected_root:
                head = get_submit(store, branch.stable_head)
                if head.trie_root.hex != expected_root:
                    problems.append(f"{name}: branch {bid_hex[:12]} trie root mismatch")
                else:
                    trie_mod.items(trie_mod.Trie(head.trie_root, store))  # must be fully readable
    return problems
