"""Deterministic discrete-event simulation of a replica group plus clients.

Everything runs on virtual time in one thread: message latency and drops
come from a seeded RNG, replica timers are injected clock events, and all
events pop in a total (time, tiebreak) order, so a given (config, workload)
always produces the identical trace. Fault adapters script the Byzantine
behaviors the protocol must survive: crashing, going mute, and an
equivocating leader that shows different batches to different followers.
"""

from __future__ import annotations

import heapq
import itertools
import random
from dataclasses import dataclass, field

from . import crypto, wire
from .client import ClientSession, RequestFailed
from .replica import Mode, Replica, ReplicaConfig
from .wire import MessageKind, PrePrepareBody, WireEnvelope


class NonQuiescent(Exception):
    """The run hit the max-event safety valve before going idle."""


CRASH_AT = "crash_at"
MUTE = "mute"
EQUIVOCATE = "equivocate"


@dataclass
class SimConfig:
    n: int = 4
    f: int = 1
    seed: int = 0
    mode: crypto.CryptoMode = crypto.CryptoMode.MAC_INTER_NODE
    latency: tuple = (0.001, 0.005)  # uniform per-link delay bounds [s]
    drop_prob: float = 0.0
    partitions: tuple = ()  # ((start, end, frozenset of isolated nodes), ...)
    faults: dict = field(default_factory=dict)  # node -> (kind, *args)
    auth: bool = True  # real inter-node authenticators on the fabric
    client_auth: bool = True  # RSA-signed client requests
    num_clients: int = 1
    requests_per_client: int = 10
    payload_size: int = 32
    client_timeout: float = 4.0
    batch_size: int = 1
    batch_timeout: float = 0.05
    checkpoint_interval: int = 500
    log_capacity: int = 10_000
    view_change_timeout: float = 1.0
    max_events: int = 5_000_000


# RSA key generation dominates small-run setup cost, so keypairs are pooled
# and reused across worlds; secrecy is irrelevant inside a simulation.
_KEY_POOL: list = []


def _pooled_keys(count: int):
    while len(_KEY_POOL) < count:
        _KEY_POOL.append(crypto.generate_keypair())
    return _KEY_POOL[:count]


def build_keystores(n: int, client_ids, seed: int = 0):
    """In-memory KeyStores for n nodes plus the given clients."""
    ids = list(range(n)) + list(client_ids)
    keys = dict(zip(ids, _pooled_keys(len(ids))))
    pubs = {i: k.public_key() for i, k in keys.items()}
    rng = random.Random(seed ^ 0x5EC4E7)
    secrets = {}
    for a in range(n):
        for b in ids:
            if b > a:
                secrets[(a, b)] = rng.randbytes(crypto.MAC_KEY_LEN)
    stores = {}
    for i in ids:
        macs = {}
        for (a, b), s in secrets.items():
            if a == i:
                macs[b] = s
            elif b == i:
                macs[a] = s
        stores[i] = crypto.KeyStore(i, keys[i], dict(pubs), macs)
    return stores


@dataclass
class _SimNode:
    replica: Replica
    fault: tuple = None
    crashed: bool = False


@dataclass
class _SimClient:
    session: ClientSession
    remaining: int
    failed: int = 0


class World:
    def __init__(self, config: SimConfig):
        self.config = config
        self.now = 0.0
        self.rng = random.Random(config.seed)
        self._tiebreak = itertools.count()
        self._events: list = []
        self._timer_gen: dict = {}
        self.trace: list = []
        self.committed: dict = {i: [] for i in range(config.n)}
        self.client_ids = [config.n + k for k in range(config.num_clients)]

        if config.auth or config.client_auth:
            self.keystores = build_keystores(config.n, self.client_ids,
                                             config.seed)
        else:
            self.keystores = None

        self.nodes = {}
        for i in range(config.n):
            rc = ReplicaConfig(
                n=config.n, f=config.f, self_id=i, mode=config.mode,
                batch_size=config.batch_size,
                batch_timeout=config.batch_timeout,
                checkpoint_interval=config.checkpoint_interval,
                log_capacity=config.log_capacity,
                view_change_timeout=config.view_change_timeout)
            ks = self.keystores[i] if self.keystores else None
            verifier = None if config.client_auth else (lambda req: True)
            vc_verifier = None if config.auth else (lambda env: True)
            rep = Replica(rc, keystore=ks, request_verifier=verifier,
                          vc_verifier=vc_verifier, tracer=self._node_trace)
            self.nodes[i] = _SimNode(rep, config.faults.get(i))

        self.clients = {}
        for cid in self.client_ids:
            ks = self.keystores[cid] if (self.keystores and config.client_auth) \
                else None
            sess = ClientSession(cid, config.n, config.f, config.mode,
                                 keystore=ks)
            self.clients[cid] = _SimClient(sess, config.requests_per_client)
            self._push(0.0, ("client_submit", cid))

    # -- event plumbing ----------------------------------------------------

    def _push(self, at: float, item):
        heapq.heappush(self._events, (at, next(self._tiebreak), item))

    def _node_trace(self, record):
        record["t"] = round(self.now, 9)
        self.trace.append(record)
        if record["event"] == "committed":
            node = record["node"]
            rep = self.nodes[node].replica
            seq = record["seq"]
            entry = rep.log.get(seq)
            self.committed[node].append((seq, entry.digest, entry.body.batch))

    def _partitioned(self, a: int, b: int) -> bool:
        for start, end, isolated in self.config.partitions:
            if start <= self.now < end and ((a in isolated) != (b in isolated)):
                return True
        return False

    def _transmit(self, src: int, dest: int, env: WireEnvelope):
        if self._partitioned(src, dest):
            return
        if self.config.drop_prob > 0 and \
                self.rng.random() < self.config.drop_prob:
            return
        delay = self.rng.uniform(*self.config.latency)
        self._push(self.now + delay, ("deliver", src, dest, wire.encode(env)))

    def _authenticated(self, env: WireEnvelope, dests, sender_id: int):
        if not self.config.auth:
            return env
        if env.auths:  # forwarded client request keeps its own signature
            return env
        if env.kind == MessageKind.REQUEST:
            return env
        ks = self.keystores[sender_id]
        return crypto.attach(env, crypto.authenticate(
            env, dests, self.config.mode, ks))

    # -- replica output dispatch -------------------------------------------

    def _dispatch(self, node_id: int, out):
        node = self.nodes[node_id]
        outbound = out.outbound
        if node.fault and node.fault[0] == MUTE:
            outbound = []
        if node.fault and node.fault[0] == EQUIVOCATE:
            outbound = self._equivocate(outbound)
        for dests, env in outbound:
            env = self._authenticated(env, dests, node_id)
            for dest in dests:
                self._transmit(node_id, dest, env)
        for key, delay in out.timer_starts:
            gen = self._timer_gen.get((node_id, key), 0) + 1
            self._timer_gen[(node_id, key)] = gen
            self._push(self.now + delay, ("node_timer", node_id, key, gen))
        for key in out.timer_stops:
            self._timer_gen[(node_id, key)] = \
                self._timer_gen.get((node_id, key), 0) + 1

    def _equivocate(self, outbound):
        """Scripted conflicting proposals: odd-id recipients get a batch with
        a duplicated (still validly signed) request, so its digest differs."""
        result = []
        for dests, env in outbound:
            if env.kind != MessageKind.PRE_PREPARE:
                result.append((dests, env))
                continue
            try:
                body = PrePrepareBody.decode(env.payload)
            except wire.WireError:
                result.append((dests, env))
                continue
            if not body.batch:
                result.append((dests, env))
                continue
            alt = PrePrepareBody.for_batch((body.batch[0],) + body.batch)
            alt_env = WireEnvelope(env.kind, env.view, env.seq, env.sender,
                                   alt.encode())
            even = tuple(d for d in dests if d % 2 == 0)
            odd = tuple(d for d in dests if d % 2 == 1)
            if even:
                result.append((even, env))
            if odd:
                result.append((odd, alt_env))
        return result

    # -- event handlers ----------------------------------------------------

    def _node_alive(self, node: _SimNode) -> bool:
        if node.crashed:
            return False
        if node.fault and node.fault[0] == CRASH_AT and \
                self.now >= node.fault[1]:
            node.crashed = True
            return False
        return True

    def _handle(self, item):
        kind = item[0]
        if kind == "deliver":
            _, src, dest, frame = item
            if dest in self.nodes:
                node = self.nodes[dest]
                if not self._node_alive(node):
                    return
                try:
                    env = wire.decode(frame)
                except wire.WireError:
                    return
                if self.config.auth and env.kind != MessageKind.REQUEST:
                    ks = self.keystores[dest]
                    if not crypto.verify_incoming(env, self.config.mode, ks):
                        node.replica.counters["rejected"] += 1
                        return
                if env.kind == MessageKind.REQUEST and self.config.client_auth:
                    pass  # the replica core re-checks client signatures
                self._dispatch(dest, node.replica.on_envelope(env))
            else:
                self._client_deliver(dest, frame)
        elif kind == "node_timer":
            _, node_id, key, gen = item
            if self._timer_gen.get((node_id, key)) != gen:
                return
            self._timer_gen[(node_id, key)] = gen + 1
            node = self.nodes[node_id]
            if self._node_alive(node):
                self._dispatch(node_id, node.replica.on_timeout(key))
        elif kind == "client_submit":
            self._client_submit(item[1])
        elif kind == "client_timer":
            _, cid, rid, gen = item
            if self._timer_gen.get((cid, rid)) != gen:
                return
            self._client_timeout(cid, rid)

    def _client_submit(self, cid: int):
        cl = self.clients[cid]
        if cl.remaining <= 0:
            return
        cl.remaining -= 1
        payload = self.rng.randbytes(self.config.payload_size)
        req, env, leader = cl.session.make_request(payload, self.now)
        self._transmit(cid, leader % self.config.n, env)
        gen = self._timer_gen.get((cid, req.request_id), 0) + 1
        self._timer_gen[(cid, req.request_id)] = gen
        self._push(self.now + self.config.client_timeout,
                   ("client_timer", cid, req.request_id, gen))

    def _client_timeout(self, cid: int, rid: int):
        cl = self.clients[cid]
        try:
            action = cl.session.on_timeout(rid)
        except RequestFailed:
            cl.failed += 1
            self._push(self.now, ("client_submit", cid))
            return
        if action is None:
            return
        dests, env = action
        for d in dests:
            self._transmit(cid, d, env)
        gen = self._timer_gen[(cid, rid)] + 1
        self._timer_gen[(cid, rid)] = gen
        self._push(self.now + self.config.client_timeout,
                   ("client_timer", cid, rid, gen))

    def _client_deliver(self, cid: int, frame: bytes):
        cl = self.clients[cid]
        try:
            env = wire.decode(frame)
        except wire.WireError:
            return
        done = cl.session.on_reply(env, self.now)
        if done is not None:
            self._timer_gen[(cid, done.request_id)] = \
                self._timer_gen.get((cid, done.request_id), 0) + 1
            self.trace.append({"node": cid, "event": "client_done",
                               "view": env.view, "rid": done.request_id,
                               "t": round(self.now, 9)})
            self._push(self.now, ("client_submit", cid))

    # -- running and checking ----------------------------------------------

    def run(self, until: float = None) -> list:
        """Drain events until quiescent (or past ``until``); returns trace."""
        processed = 0
        while self._events:
            at, _, item = heapq.heappop(self._events)
            if until is not None and at > until:
                break
            self.now = at
            self._handle(item)
            processed += 1
            if processed > self.config.max_events:
                raise NonQuiescent(f"exceeded {self.config.max_events} events")
        return self.trace

    def correct_nodes(self):
        return [i for i in range(self.config.n)
                if i not in self.config.faults]

    def check_agreement(self):
        """No two correct replicas commit different digests at one seq."""
        by_seq = {}
        for i in self.correct_nodes():
            for seq, digest, batch in self.committed[i]:
                by_seq.setdefault(seq, {})[i] = digest
        for seq, digests in sorted(by_seq.items()):
            if len(set(digests.values())) > 1:
                raise AssertionError(
                    f"agreement violation at seq {seq}: {digests}")
        return by_seq

    def check_validity(self):
        """Every committed non-NOOP batch carries valid client signatures."""
        if not self.config.client_auth:
            return
        ks = self.keystores[0]
        for i in self.correct_nodes():
            for seq, digest, batch in self.committed[i]:
                for req in batch:
                    env = wire.request_envelope(req)
                    if not ks.verify(req.client_id, req.signature,
                                     crypto.envelope_digest(env)):
                        raise AssertionError(
                            f"validity violation at node {i} seq {seq}")

    def check_total_order(self):
        """Committed logs of correct replicas are prefix-consistent."""
        logs = {i: {seq: d for seq, d, _ in self.committed[i]}
                for i in self.correct_nodes()}
        ids = list(logs)
        for a in ids:
            for b in ids:
                if a >= b:
                    continue
                for seq in logs[a].keys() & logs[b].keys():
                    if logs[a][seq] != logs[b][seq]:
                        raise AssertionError(
                            f"order violation seq {seq} nodes {a},{b}")

    def committed_count(self, node: int) -> int:
        return len(self.committed[node])

    def total_requests_committed(self, node: int) -> int:
        return sum(len(batch) for _, _, batch in self.committed[node])

    def max_view(self) -> int:
        return max(n.replica.view for n in self.nodes.values()
                   if not n.crashed)


def trace_lines(trace) -> list:
    """Canonical text rendering of a trace, for determinism comparisons."""
    lines = []
    for rec in trace:
        items = sorted((k, v) for k, v in rec.items())
        lines.append(" ".join(f"{k}={v}" for k, v in items))
    return lines
