"""Server/client round engine with a byte-exact message transcript.

Only three message kinds are legitimate: registration of the client sample
count, broadcast of the global invariant adapter, and upload of a client's
locally tuned copy of it. Everything crosses the simulated wire as bytes, so
what the server learns is exactly what the transcript holds.

Wire format (little endian), one message::

    magic  "FSM1"   4s
    version         u8   (1)
    direction       u8   (0 server->client, 1 client->server)
    kind            u8   (see KIND_CODES)
    reserved        u8
    round           i32  (-1 for registration)
    client_id       u32
    payload_length  u64
    payload         payload_length bytes

Adapter payloads are one serialized adapter per KIA layer in ascending layer
order; a registration payload is a single u64 sample count.
"""

from __future__ import annotations

import hashlib
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .datagen import ClientData
from .errors import ConfigError, ParseError, ProtocolError
from .losses import LossConfig, bkd_loss
from .model import (ADAPTER_HEADER_SIZE, AdapterParams, DualAdapterModel, branch_logits,
                    deserialize_adapter, deserialize_adapters, serialize_adapter, serialize_adapters)
from .tensor import Tensor, backward

MSG_MAGIC = b"FSM1"
MSG_VERSION = 1
MSG_HEADER = struct.Struct("<4sBBBBiIQ")
MSG_HEADER_SIZE = MSG_HEADER.size

SERVER_TO_CLIENT = "server->client"
CLIENT_TO_SERVER = "client->server"
DIRECTION_CODES = {SERVER_TO_CLIENT: 0, CLIENT_TO_SERVER: 1}

KIND_CODES = {
    "broadcast_A_di": 1,
    "upload_A_di": 2,
    "register_n_k": 3,
    # representable so that audits can name them; never emitted by the engine
    "upload_A_dw": 16,
    "raw_samples": 17,
    "logits": 18,
}
KIND_NAMES = {v: k for k, v in KIND_CODES.items()}
ALLOWED_KINDS = {"broadcast_A_di": SERVER_TO_CLIENT, "upload_A_di": CLIENT_TO_SERVER,
                 "register_n_k": CLIENT_TO_SERVER}

TRANSCRIPT_MAGIC = b"FSTR"
TRANSCRIPT_HEADER = struct.Struct("<4sI")
RECORD_LEN = struct.Struct("<I")

REFERENCE_COMM_MB = {"dual-adapter": 2.270, "FedCLIP": 2.010, "FedAvg": 13.650, "logits": 0.003}


# ---------------------------------------------------------------- messages


@dataclass
class Message:
    direction: str
    kind: str
    round: int
    client_id: int
    payload: bytes = b""

    @property
    def byte_length(self) -> int:
        return MSG_HEADER_SIZE + len(self.payload)

    def to_bytes(self) -> bytes:
        try:
            kind = KIND_CODES[self.kind]
        except KeyError:
            kind = int(self.kind.removeprefix("unknown:")) if self.kind.startswith("unknown:") else 255
        head = MSG_HEADER.pack(MSG_MAGIC, MSG_VERSION, DIRECTION_CODES[self.direction], kind, 0,
                               self.round, self.client_id, len(self.payload))
        return head + self.payload

    @classmethod
    def from_bytes(cls, buf: bytes, offset: int = 0) -> tuple[Message, int]:
        if len(buf) - offset < MSG_HEADER_SIZE:
            raise ParseError("message shorter than its header")
        magic, version, direction, kind, _, rnd, cid, n = MSG_HEADER.unpack_from(buf, offset)
        if magic != MSG_MAGIC:
            raise ParseError(f"bad message magic {magic!r}")
        if version != MSG_VERSION:
            raise ParseError(f"unsupported message version {version}")
        if direction not in (0, 1):
            raise ParseError(f"bad direction code {direction}")
        start = offset + MSG_HEADER_SIZE
        if len(buf) < start + n:
            raise ParseError(f"truncated message payload: need {n} bytes, have {len(buf) - start}")
        msg = cls(SERVER_TO_CLIENT if direction == 0 else CLIENT_TO_SERVER,
                  KIND_NAMES.get(kind, f"unknown:{kind}"), rnd, cid, bytes(buf[start:start + n]))
        return msg, start + n


def register_payload(n_k: int) -> bytes:
    return struct.pack("<Q", n_k)


def write_transcript(messages: Sequence[Message], path, digest_path=None) -> None:
    """Length-prefixed binary log plus an optional one-line-per-message digest."""
    with open(path, "wb") as fh:
        fh.write(TRANSCRIPT_HEADER.pack(TRANSCRIPT_MAGIC, 1))
        for m in messages:
            raw = m.to_bytes()
            fh.write(RECORD_LEN.pack(len(raw)))
            fh.write(raw)
    if digest_path is not None:
        with open(digest_path, "w") as fh:
            for i, m in enumerate(messages):
                sha = hashlib.sha256(m.payload).hexdigest()[:16]
                fh.write(f"{i}\t{m.round}\t{m.direction}\t{m.kind}\tclient={m.client_id}"
                         f"\tbytes={m.byte_length}\tsha256={sha}\n")


def read_transcript(path) -> list[Message]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < TRANSCRIPT_HEADER.size:
        raise ParseError("transcript file too short")
    magic, _ = TRANSCRIPT_HEADER.unpack_from(buf, 0)
    if magic != TRANSCRIPT_MAGIC:
        raise ParseError(f"bad transcript magic {magic!r}")
    off, out = TRANSCRIPT_HEADER.size, []
    while off < len(buf):
        if len(buf) - off < RECORD_LEN.size:
            raise ParseError("truncated transcript record length")
        (n,) = RECORD_LEN.unpack_from(buf, off)
        off += RECORD_LEN.size
        msg, end = Message.from_bytes(buf[off:off + n])
        if end != n:
            raise ParseError("transcript record length disagrees with message")
        out.append(msg)
        off += n
    return out


# ---------------------------------------------------------------- optimizer


class SGD:
    """Plain SGD with optional heavy-ball momentum."""

    def __init__(self, params: Sequence[Tensor], momentum: float = 0.0):
        self.params = list(params)
        self.momentum = momentum
        self.velocity: list[np.ndarray | None] = [None] * len(self.params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            if self.momentum:
                v = g if self.velocity[i] is None else self.momentum * self.velocity[i] + g
                self.velocity[i] = v
            else:
                v = g
            p.data = p.data - lr * v


# ---------------------------------------------------------------- states


@dataclass
class ClientState:
    client_id: int
    data: ClientData
    model: DualAdapterModel
    rng: np.random.Generator
    momentum: float = 0.0
    trunk: np.ndarray | None = None
    private_opt: SGD | None = None
    shared_opt: SGD | None = None
    log: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if self.trunk is None:
            self.trunk = self.model.trunk(self.data.x).data
        if self.private_opt is None:
            self.private_opt = SGD(self.model.private_parameters(), self.momentum)
        if self.shared_opt is None:
            self.shared_opt = SGD(self.model.shared_parameters(), self.momentum)

    @property
    def n_k(self) -> int:
        return self.data.n

    def registration(self) -> Message:
        return Message(CLIENT_TO_SERVER, "register_n_k", -1, self.client_id, register_payload(self.n_k))

    def receive(self, msg: Message) -> None:
        if msg.kind != "broadcast_A_di" or msg.client_id != self.client_id:
            raise ProtocolError(f"client {self.client_id} cannot accept {msg.kind} for {msg.client_id}")
        self.model.set_shared(deserialize_adapters(msg.payload, self.model.kia_layers))
        self.shared_opt = SGD(self.model.shared_parameters(), self.momentum)

    def upload(self, rnd: int) -> Message:
        return Message(CLIENT_TO_SERVER, "upload_A_di", rnd, self.client_id,
                       serialize_adapters(self.model.a_di))

    def private_fingerprints(self) -> set[str]:
        if self.model.a_dw is None:
            return set()
        return {hashlib.sha256(serialize_adapter(a)).hexdigest() for a in self.model.a_dw.values()}


@dataclass
class ServerState:
    a_di_global: dict[int, AdapterParams] | None
    layers: tuple[int, ...]
    n_clients: int
    round: int = 0
    n_k: dict[int, int] = field(default_factory=dict)
    weights: dict[int, float] = field(default_factory=dict)
    transcript: list[Message] = field(default_factory=list)

    @property
    def total_samples(self) -> int:
        return sum(self.n_k.values())


def server_init(n_clients: int, a_di_init: dict[int, AdapterParams] | None,
                layers: tuple[int, ...] = (1,)) -> ServerState:
    """Start a server holding the initial global adapter (identity-start)."""
    if n_clients < 1:
        raise ConfigError("federation needs at least one client", field="clients")
    glob = None if a_di_init is None else {k: a.copy(trainable=False) for k, a in a_di_init.items()}
    return ServerState(glob, tuple(layers), n_clients)


def register_clients(server: ServerState, clients: Iterable[ClientState]) -> dict[int, float]:
    """Collect ``n_k`` from every client and fix ``w_k = n_k / N``."""
    for c in clients:
        msg = c.registration()
        server.transcript.append(msg)
        (n,) = struct.unpack("<Q", msg.payload)
        server.n_k[msg.client_id] = n
    if len(server.n_k) != server.n_clients:
        raise ProtocolError(f"expected {server.n_clients} registrations, got {len(server.n_k)}")
    total = server.total_samples
    if total <= 0:
        raise ConfigError("clients hold no samples", field="clients")
    server.weights = {k: n / total for k, n in sorted(server.n_k.items())}
    return server.weights


def broadcast(server: ServerState, clients: Iterable[ClientState], rnd: int | None = None) -> None:
    """Send a copy of the global adapter to each client (one message each)."""
    if server.a_di_global is None:
        return
    rnd = server.round if rnd is None else rnd
    payload = serialize_adapters(server.a_di_global)
    for c in clients:
        msg = Message(SERVER_TO_CLIENT, "broadcast_A_di", rnd, c.client_id, payload)
        server.transcript.append(msg)
        c.receive(msg)


def aggregate(server: ServerState, uploads: Sequence[tuple[int, dict[int, AdapterParams]]],
              participants: Sequence[int] | None = None) -> dict[int, AdapterParams]:
    """Sample-weighted mean of the uploaded adapters, installed as the new global.

    Computed as ``a_0 + sum_k w_k (a_k - a_0)`` with ``a_0`` the upload of the
    smallest client id and clients summed in id order, so the result does not
    depend on upload order and identical uploads are reproduced exactly.
    """
    expected = sorted(server.weights) if participants is None else sorted(participants)
    by_id = dict(uploads)
    for cid in expected:
        if cid not in by_id:
            raise ProtocolError(f"missing upload from client {cid}")
    extra = set(by_id) - set(expected)
    if extra:
        raise ProtocolError(f"unexpected uploads from clients {sorted(extra)}")
    if participants is None:
        weights = server.weights
    else:
        sub = sum(server.n_k[c] for c in expected)
        weights = {c: server.n_k[c] / sub for c in expected}

    anchor = by_id[expected[0]]
    out = {}
    for layer, a0 in anchor.items():
        base = a0.parameters()
        acc = [np.zeros_like(p.data) for p in base]
        for cid in expected[1:]:
            w = weights[cid]
            for i, p in enumerate(by_id[cid][layer].parameters()):
                acc[i] += w * (p.data - base[i].data)
        out[layer] = AdapterParams(*(Tensor(b.data + d) for b, d in zip(base, acc)))
    server.a_di_global = out
    server.round += 1
    return out


# ---------------------------------------------------------------- local training


@dataclass
class LocalTrainConfig:
    epochs: int = 3
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    schedule: str = "step"
    step_fraction: float = 0.2
    gamma: float = 0.1
    loss: LossConfig = field(default_factory=LossConfig)

    def lr_at(self, rnd: int, total_rounds: int) -> float:
        """Step decay: multiply by ``gamma`` every ``ceil(step_fraction * R)`` rounds."""
        if self.schedule == "constant":
            return self.lr
        step = max(1, math.ceil(self.step_fraction * max(total_rounds, 1)))
        return self.lr * self.gamma ** (rnd // step)


def client_local_train(client: ClientState, epochs: int, loss_cfg: LossConfig, lr: float,
                       batch_size: int = 32, epoch_offset: int = 0) -> ClientState:
    """Mini-batch SGD on the client's objective over all its trainable adapters."""
    if client.n_k == 0:
        raise ConfigError(f"client {client.client_id} has an empty dataset", field="clients")
    model = client.model
    opts = [client.shared_opt, client.private_opt]
    if not model.trainable_parameters():
        return client
    di_active, dw_active = model.a_di is not None, model.a_dw is not None
    fused = loss_cfg.ce_target == "fused-only"
    for e in range(epochs):
        t = epoch_offset + e
        order = client.rng.permutation(client.n_k)
        sums = np.zeros(4)
        n_batches = 0
        for s in range(0, client.n_k, batch_size):
            idx = order[s:s + batch_size]
            logits = branch_logits(model, trunk=Tensor(client.trunk[idx]), need_fused=fused)
            loss = bkd_loss(logits.z_di, logits.z_dw, client.data.y[idx], loss_cfg, t,
                            z_fused=logits.z_fused, di_active=di_active, dw_active=dw_active)
            for opt in opts:
                opt.zero_grad()
            backward(loss.total)
            for opt in opts:
                opt.step(lr)
            sums += (loss.total.item(), loss.ce, loss.kl_di, loss.kl_dw)
            n_batches += 1
        mean = sums / n_batches
        client.log.append({"epoch": t, "loss": mean[0], "ce": mean[1], "kl_di": mean[2],
                           "kl_dw": mean[3], "alpha": loss_cfg.alpha_at(t), "lr": lr})
    return client


# ---------------------------------------------------------------- rounds


@dataclass
class RunArtifacts:
    global_adapter: dict[int, AdapterParams] | None
    client_private: dict[int, DualAdapterModel]
    metrics: list[dict]
    transcript: list[Message]
    private_fingerprints: set[str]
    history: list[dict] = field(default_factory=list)


def _snapshot(server: ServerState, clients: Sequence[ClientState]) -> dict:
    out = {"global": None if server.a_di_global is None
           else [a.flat().copy() for _, a in sorted(server.a_di_global.items())]}
    for c in clients:
        out[c.client_id] = [p.data.copy() for p in c.model.trainable_parameters()]
    return out


def run_rounds(server: ServerState, clients: Sequence[ClientState], rounds: int, cfg: LocalTrainConfig,
               evaluate: Callable[[int, ServerState, Sequence[ClientState]], dict] | None = None,
               participation: float = 1.0, seed: int = 0, client_workers: int = 1,
               keep_history: bool = False) -> RunArtifacts:
    """Run ``rounds`` federated rounds, each ending in one aggregation.

    ``evaluate`` is called before the first round (round 0) and after each
    aggregation; its dict is merged into that round's metrics row.
    """
    if rounds < 0:
        raise ConfigError("rounds must be nonnegative", field="rounds")
    if not 0 < participation <= 1:
        raise ConfigError("participation must be in (0, 1]", field="participation")
    if not server.weights:
        register_clients(server, clients)
    by_id = {c.client_id: c for c in clients}
    pick_rng = np.random.default_rng(np.random.SeedSequence([seed, 104729]))
    fingerprints: set[str] = set()
    for c in clients:
        fingerprints |= c.private_fingerprints()
    history = [_snapshot(server, clients)] if keep_history else []

    metrics = []
    if evaluate is not None:
        metrics.append({"round": 0, **evaluate(0, server, clients), "comm_bytes": 0})

    for r in range(rounds):
        if participation < 1.0:
            m = max(1, int(round(participation * len(clients))))
            chosen = sorted(int(i) for i in pick_rng.choice(sorted(by_id), size=m, replace=False))
        else:
            chosen = sorted(by_id)
        active = [by_id[i] for i in chosen]
        start = len(server.transcript)
        broadcast(server, active, r)

        lr = cfg.lr_at(r, rounds)

        def train(c):
            return client_local_train(c, cfg.epochs, cfg.loss, lr, cfg.batch_size, epoch_offset=r * cfg.epochs)

        if client_workers > 1:
            with ThreadPoolExecutor(client_workers) as pool:
                list(pool.map(train, active))
        else:
            for c in active:
                train(c)

        if server.a_di_global is not None:
            uploads = []
            for c in active:
                msg = c.upload(r)
                server.transcript.append(msg)
                uploads.append((msg.client_id, deserialize_adapters(msg.payload, server.layers)))
            aggregate(server, uploads, None if participation >= 1.0 else chosen)
        else:
            server.round += 1
        for c in active:
            fingerprints |= c.private_fingerprints()
        if keep_history:
            history.append(_snapshot(server, clients))

        if evaluate is not None:
            row = {"round": r + 1, **evaluate(r + 1, server, clients)}
            logs = [c.log[-1] for c in active if c.log]
            for key in ("ce", "kl_di", "kl_dw", "alpha"):
                row[key] = float(np.mean([lg[key] for lg in logs])) if logs else 0.0
            row["lr"] = lr
            row["comm_bytes"] = sum(m.byte_length for m in server.transcript[start:])
            metrics.append(row)

    return RunArtifacts(server.a_di_global, {c.client_id: c.model for c in clients}, metrics,
                        list(server.transcript), fingerprints, history)


# ---------------------------------------------------------------- accounting


@dataclass
class CommCostModel:
    bytes_per_param: int = 8
    include_logits: bool = False
    n_classes: int = 5
    batch_size: int = 32
    local_epochs: int = 3

    def logits_bytes(self, n_k: int) -> int:
        if not self.include_logits:
            return 0
        return math.ceil(n_k / self.batch_size) * self.local_epochs * self.n_classes * self.bytes_per_param


def _modeled_bytes(msg: Message, bpp: int) -> int:
    if bpp == 8 or msg.kind not in ("broadcast_A_di", "upload_A_di"):
        return msg.byte_length
    off, n_params, blobs = 0, 0, 0
    while off < len(msg.payload):
        a, off = deserialize_adapter(msg.payload, off)
        n_params += a.n_params
        blobs += 1
    return MSG_HEADER_SIZE + blobs * ADAPTER_HEADER_SIZE + n_params * bpp


@dataclass
class CommReport:
    rows: list[dict]
    round_totals: dict[int, int]
    setup_bytes: int
    total_bytes: int
    transcript_bytes: int
    reference_mb: dict[str, float]


def comm_cost_report(transcript: Sequence[Message], model: CommCostModel = CommCostModel()) -> CommReport:
    """Per-client per-round download/upload/logits bytes and their totals."""
    n_k: dict[int, int] = {}
    cells: dict[tuple[int, int], dict] = {}
    setup = 0
    for m in transcript:
        size = _modeled_bytes(m, model.bytes_per_param)
        if m.kind == "register_n_k":
            n_k[m.client_id] = struct.unpack("<Q", m.payload)[0]
            setup += size
            continue
        cell = cells.setdefault((m.round, m.client_id),
                                {"round": m.round, "client_id": m.client_id, "down_bytes": 0,
                                 "up_bytes": 0, "logits_bytes": 0, "other_bytes": 0})
        if m.kind == "broadcast_A_di":
            cell["down_bytes"] += size
            cell["logits_bytes"] += model.logits_bytes(n_k.get(m.client_id, 0))
        elif m.kind == "upload_A_di":
            cell["up_bytes"] += size
        else:
            cell["other_bytes"] += size
    rows = []
    totals: dict[int, int] = {}
    for key in sorted(cells):
        c = cells[key]
        c["total_bytes"] = c["down_bytes"] + c["up_bytes"] + c["logits_bytes"] + c["other_bytes"]
        rows.append(c)
        totals[c["round"]] = totals.get(c["round"], 0) + c["total_bytes"]
    return CommReport(rows, totals, setup, setup + sum(totals.values()),
                      sum(m.byte_length for m in transcript), dict(REFERENCE_COMM_MB))


def logits_share_sweep(param_counts: Iterable[int], logits_values_per_round: int,
                       bytes_per_param: int = 4) -> list[dict]:
    """Share of per-round traffic taken by logits for a range of adapter sizes."""
    out = []
    lb = logits_values_per_round * bytes_per_param
    for n in param_counts:
        ab = 2 * n * bytes_per_param
        out.append({"adapter_params": int(n), "adapter_bytes": ab, "logits_bytes": lb,
                    "logits_share": lb / (ab + lb)})
    return out


# ---------------------------------------------------------------- audit


@dataclass
class AuditReport:
    passed: bool
    offending: list[tuple[int, str]]
    n_messages: int


def audit_transcript(transcript: Sequence[Message], layers: tuple[int, ...] | None = None,
                     d_h: int | None = None, rank: int | None = None,
                     private_fingerprints: Iterable[str] = ()) -> AuditReport:
    """Check that only registration and invariant-adapter traffic was exchanged.

    A message fails if its kind or direction is not allowed, its payload does
    not parse as that kind's schema (optionally with the expected adapter
    dimensions), or any adapter blob matches a known private adapter.
    """
    private = set(private_fingerprints)
    bad: list[tuple[int, str]] = []
    for i, m in enumerate(transcript):
        want = ALLOWED_KINDS.get(m.kind)
        if want is None:
            bad.append((i, f"forbidden message kind {m.kind!r} (client {m.client_id}, round {m.round})"))
            continue
        if m.direction != want:
            bad.append((i, f"{m.kind} sent in direction {m.direction}"))
            continue
        if m.kind == "register_n_k":
            if len(m.payload) != 8:
                bad.append((i, f"register_n_k payload has {len(m.payload)} bytes, expected 8"))
            continue
        off, count = 0, 0
        try:
            while off < len(m.payload):
                start = off
                a, off = deserialize_adapter(m.payload, off)
                count += 1
                if (d_h is not None and a.d_h != d_h) or (rank is not None and a.rank != rank):
                    raise ParseError(f"adapter dims ({a.d_h}, {a.rank}) differ from ({d_h}, {rank})")
                if hashlib.sha256(m.payload[start:off]).hexdigest() in private:
                    raise ParseError("payload matches a client-private adapter")
            if count == 0 or (layers is not None and count != len(layers)):
                raise ParseError(f"payload holds {count} adapters")
        except ParseError as exc:
            bad.append((i, f"{m.kind} payload rejected: {exc}"))
    return AuditReport(not bad, bad, len(transcript))
