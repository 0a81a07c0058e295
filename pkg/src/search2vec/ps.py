"""Column-partitioned parameter-server training.

Each shard owns a contiguous slice of vector dimensions for the whole
vocabulary; clients drive minibatches and only ids and scalars cross the
wire. A minibatch round trip is: the client sends the (center, context,
weight, label) pairs plus a negative-sampling seed to every shard; each
shard draws the same negatives, computes slice-local partial dot
products, and answers; the client sums the partials in shard order,
turns them into coefficients, and broadcasts those back; shards then
apply the updates to their slices sequentially, without locks between
concurrent clients.

Shards run as single-threaded event loops (one message at a time);
clients may run concurrently, in which case batch interleaving is
nondeterministic and the run carries no equivalence guarantee. With one
client (or batch serialization on), a run reproduces the reference
trainer exactly: bit-for-bit with one shard, and within float-summation
noise of the slice partials otherwise.
"""

from __future__ import annotations

import logging
import socket
import threading
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .embeddings import EmbeddingTable, init_embeddings
from .sessions import Session
from .trainer import (
    NegativeSampler,
    PairBatch,
    TrainingConfig,
    alpha_schedule,
    coefficients,
    count_scheduled_pairs,
    epoch_order,
    expand_negatives,
    negative_seed,
    objective_value,
    probe_pairs,
    request_batch,
)
from .vocab import Vocabulary, build_vocabulary
from . import wire
from .wire import (
    Ack,
    AllocRequest,
    AllocResult,
    ByteCounter,
    CoefficientBroadcast,
    ControlError,
    FetchSlice,
    Message,
    MinibatchRequest,
    PartialDotsResponse,
    ProtocolError,
    Shutdown,
    SliceData,
    TransportError,
)

logger = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    """Distributed training failed; carries the last epoch checkpoint."""

    def __init__(self, reason: str, last_completed_epoch: int, checkpoint):
        super().__init__(reason)
        self.last_completed_epoch = last_completed_epoch
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class DimSlice:
    shard_id: int
    lo: int  # inclusive
    hi: int  # exclusive

    @property
    def width(self) -> int:
        return self.hi - self.lo


def partition_dims(d: int, n_shards: int) -> list[DimSlice]:
    """Contiguous dimension slices, widths differing by at most one.

    The first d mod n_shards shards take the extra dimension.
    """
    if not 1 <= n_shards <= d:
        raise ValueError(f"need 1 <= shards <= dim, got shards={n_shards}, dim={d}")
    base, remainder = divmod(d, n_shards)
    slices = []
    lo = 0
    for shard_id in range(n_shards):
        width = base + (1 if shard_id < remainder else 0)
        slices.append(DimSlice(shard_id, lo, lo + width))
        lo += width
    return slices


class ShardState:
    """One shard: dimension blocks for all vocabulary rows plus the
    negative-sampling table (identical on every shard)."""

    def __init__(
        self,
        dim_slice: DimSlice,
        input_block: np.ndarray,
        output_block: np.ndarray,
        sampler: NegativeSampler,
    ):
        self.slice = dim_slice
        self.input_block = input_block
        self.output_block = output_block
        self.sampler = sampler
        self.vocab_size = input_block.shape[0]
        self.pending: dict[int, PairBatch] = {}
        self.pair_counter = 0  # global pair-index allocator (hosted on shard 0)

    def handle(self, message: Message) -> Message:
        if isinstance(message, MinibatchRequest):
            return self._handle_request(message)
        if isinstance(message, CoefficientBroadcast):
            return self._handle_coefficients(message)
        if isinstance(message, AllocRequest):
            start = self.pair_counter
            self.pair_counter += message.count
            return AllocResult(start)
        if isinstance(message, FetchSlice):
            return SliceData(self.input_block.copy(), self.output_block.copy())
        if isinstance(message, Shutdown):
            return Ack(0)
        return ControlError(0, f"unhandled message {type(message).__name__}")

    def _handle_request(self, request: MinibatchRequest) -> Message:
        pairs = request.pairs
        ids = np.concatenate([pairs.centers, pairs.contexts])
        if len(ids) and (ids.min() < 0 or ids.max() >= self.vocab_size):
            return ControlError(
                request.batch_id,
                f"unknown id {int(ids.max())} for vocabulary of {self.vocab_size}",
            )
        negatives = expand_negatives(
            pairs, request.negative_count, self.sampler, request.rng_seed
        )
        full = PairBatch.concat(pairs, negatives)
        self.pending[request.batch_id] = full
        dots = np.einsum(
            "ij,ij->i", self.input_block[full.centers], self.output_block[full.contexts]
        )
        return PartialDotsResponse(request.batch_id, self.slice.shard_id, dots)

    def _handle_coefficients(self, broadcast: CoefficientBroadcast) -> Message:
        batch = self.pending.get(broadcast.batch_id)
        if batch is None:
            logger.warning(
                "shard %d: coefficients for unknown batch %d ignored",
                self.slice.shard_id, broadcast.batch_id,
            )
            return Ack(broadcast.batch_id)
        if len(batch) != len(broadcast.coefficients):
            return ControlError(
                broadcast.batch_id,
                f"{len(broadcast.coefficients)} coefficients for {len(batch)} pairs",
            )
        gs = broadcast.coefficients
        inputs = self.input_block
        outputs = self.output_block
        for i in range(len(batch)):
            g = gs[i]
            if g == 0.0:
                continue
            center = batch.centers[i]
            context = batch.contexts[i]
            previous_output = outputs[context].copy()
            outputs[context] += g * inputs[center]
            inputs[center] += g * previous_output
        # Entry kept: application is at-most-once, a replayed broadcast
        # re-applies and corrupts the state (asserted by tests).
        return Ack(broadcast.batch_id)


def make_shards(
    table: EmbeddingTable, n_shards: int, sampler: NegativeSampler
) -> list[ShardState]:
    slices = partition_dims(table.dim, n_shards)
    return [
        ShardState(
            s,
            table.input_vectors[:, s.lo : s.hi].copy(),
            table.output_vectors[:, s.lo : s.hi].copy(),
            sampler,
        )
        for s in slices
    ]


def assemble_table(slices: list[SliceData]) -> EmbeddingTable:
    """Concatenate shard slices (in shard-id order) into a full table."""
    return EmbeddingTable(
        np.concatenate([s.input_block for s in slices], axis=1),
        np.concatenate([s.output_block for s in slices], axis=1),
    )


# ---------------------------------------------------------------------------
# Transports


class Channel:
    """One client's connection to all shards."""

    def roundtrip(self, shard_id: int, message: Message) -> Message:
        raise NotImplementedError

    def close(self) -> None:
        pass


class InProcessTransport:
    """Shards as in-process event loops; messages still pass through the
    codec so byte accounting matches the socket transport."""

    def __init__(self, shards: list[ShardState]):
        self.shards = shards
        self.locks = [threading.Lock() for _ in shards]
        self.counter = ByteCounter()

    def channel(self) -> Channel:
        return _InProcessChannel(self)

    def close(self) -> None:
        pass


class _InProcessChannel(Channel):
    def __init__(self, transport: InProcessTransport):
        self.transport = transport

    def roundtrip(self, shard_id: int, message: Message) -> Message:
        frame = wire.encode_message(message)
        self.transport.counter.record(frame)
        with self.transport.locks[shard_id]:
            response = self.transport.shards[shard_id].handle(wire.decode_frame(frame))
        response_frame = wire.encode_message(response)
        self.transport.counter.record(response_frame)
        return wire.decode_frame(response_frame)


def _read_exact(sock: socket.socket, count: int) -> bytes:
    chunks = []
    remaining = count
    while remaining:
        chunk = sock.recv(remaining)
        if not chunk:
            raise TransportError("connection closed mid-frame")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def _read_frame(sock: socket.socket) -> bytes:
    header = _read_exact(sock, 4)
    (length,) = np.frombuffer(header, "<u4", 1)
    return header + _read_exact(sock, int(length))


class _ShardServer(threading.Thread):
    def __init__(self, state: ShardState, host: str):
        super().__init__(daemon=True)
        self.state = state
        self.lock = threading.Lock()
        self._listener = socket.create_server((host, 0))
        self._listener.settimeout(0.2)
        self.port = self._listener.getsockname()[1]
        self._stopping = threading.Event()
        self._workers: list[threading.Thread] = []

    def run(self) -> None:
        while not self._stopping.is_set():
            try:
                conn, _ = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            worker = threading.Thread(target=self._serve, args=(conn,), daemon=True)
            worker.start()
            self._workers.append(worker)
        self._listener.close()

    def _serve(self, conn: socket.socket) -> None:
        with conn:
            while not self._stopping.is_set():
                try:
                    frame = _read_frame(conn)
                except (TransportError, OSError):
                    return
                message = wire.decode_frame(frame)
                with self.lock:
                    response = self.state.handle(message)
                try:
                    conn.sendall(wire.encode_message(response))
                except OSError:
                    return
                if isinstance(message, Shutdown):
                    return

    def stop(self) -> None:
        self._stopping.set()


class SocketTransport:
    """Shards behind localhost TCP servers, one server thread per shard."""

    def __init__(self, shards: list[ShardState], host: str = "127.0.0.1",
                 timeout: float = 30.0):
        self.host = host
        self.timeout = timeout
        self.counter = ByteCounter()
        self.servers = [_ShardServer(state, host) for state in shards]
        for server in self.servers:
            server.start()

    def channel(self) -> Channel:
        return _SocketChannel(self)

    def close(self) -> None:
        for server in self.servers:
            server.stop()
        for server in self.servers:
            server.join(timeout=2.0)


class _SocketChannel(Channel):
    def __init__(self, transport: SocketTransport):
        self.transport = transport
        self.sockets: dict[int, socket.socket] = {}

    def _socket(self, shard_id: int) -> socket.socket:
        if shard_id not in self.sockets:
            server = self.transport.servers[shard_id]
            sock = socket.create_connection((self.transport.host, server.port))
            sock.settimeout(self.transport.timeout)
            self.sockets[shard_id] = sock
        return self.sockets[shard_id]

    def roundtrip(self, shard_id: int, message: Message) -> Message:
        frame = wire.encode_message(message)
        sock = self._socket(shard_id)
        try:
            sock.sendall(frame)
            self.transport.counter.record(frame)
            response_frame = _read_frame(sock)
        except (socket.timeout, OSError) as exc:
            stale = self.sockets.pop(shard_id, None)
            if stale is not None:
                stale.close()
            raise TransportError(f"shard {shard_id}: {exc}") from exc
        self.transport.counter.record(response_frame)
        return wire.decode_frame(response_frame)

    def close(self) -> None:
        for sock in self.sockets.values():
            sock.close()
        self.sockets.clear()


# ---------------------------------------------------------------------------
# Client / orchestration


def client_aggregate(
    responses: Sequence[PartialDotsResponse],
    label_values: np.ndarray,
    weights: np.ndarray,
    alphas: np.ndarray,
) -> CoefficientBroadcast:
    """Sum shard partials (in shard-id order) into global coefficients."""
    if not responses:
        raise ProtocolError("no shard responses to aggregate")
    batch_id = responses[0].batch_id
    ordered = sorted(responses, key=lambda r: r.shard_id)
    sizes = {len(r.dots) for r in ordered}
    if len(sizes) != 1 or any(r.batch_id != batch_id for r in ordered):
        raise ProtocolError(f"inconsistent shard responses for batch {batch_id}")
    dots = np.add.reduce(np.stack([r.dots for r in ordered]), axis=0)
    gs = coefficients(dots, label_values, weights, alphas)
    return CoefficientBroadcast(batch_id, gs)


def _batch_layout(n_positions: int, n_clients: int, batch_sessions: int):
    """Chunk an epoch's positions per client and fix the global batch order.

    Returns (per-client list of position ranges, serialized global order
    as a list of (client, batch-in-client) in round-robin).
    """
    bounds = np.linspace(0, n_positions, n_clients + 1).astype(int)
    client_batches: list[list[range]] = []
    for c in range(n_clients):
        lo, hi = int(bounds[c]), int(bounds[c + 1])
        batches = [
            range(start, min(start + batch_sessions, hi))
            for start in range(lo, hi, batch_sessions)
        ]
        client_batches.append(batches)
    global_order: list[tuple[int, int]] = []
    rounds = max((len(b) for b in client_batches), default=0)
    for k in range(rounds):
        for c in range(n_clients):
            if k < len(client_batches[c]):
                global_order.append((c, k))
    return client_batches, global_order


class _ClientContext:
    def __init__(self, sessions, vocab, config, channel, n_shards, total_pairs):
        self.sessions = sessions
        self.vocab = vocab
        self.config = config
        self.channel = channel
        self.n_shards = n_shards
        self.total_pairs = total_pairs

    def run_batch(
        self, epoch: int, order: np.ndarray, positions: range, global_index: int
    ) -> int:
        """One minibatch round trip; returns the number of pairs trained."""
        config = self.config
        request_pairs = request_batch(
            self.sessions, order, positions, self.vocab, config, epoch
        )
        negative_total = config.negatives * request_pairs.n_positive
        pair_count = len(request_pairs) + negative_total
        if pair_count == 0:
            return 0
        batch_id = (epoch << 32) | global_index
        request = MinibatchRequest(
            batch_id, request_pairs, config.negatives,
            negative_seed(config, epoch, global_index),
        )

        alloc = self.channel.roundtrip(0, AllocRequest(pair_count))
        if not isinstance(alloc, AllocResult):
            raise ProtocolError(f"bad alloc response {alloc!r}")

        responses = []
        for shard_id in range(self.n_shards):
            responses.append(self._request_with_retry(shard_id, request))

        label_values = np.concatenate(
            [request_pairs.label_values(), np.zeros(negative_total)]
        )
        weights = np.concatenate([request_pairs.weights, np.ones(negative_total)])
        alphas = alpha_schedule(alloc.start, pair_count, self.total_pairs, config)
        broadcast = client_aggregate(responses, label_values, weights, alphas)

        for shard_id in range(self.n_shards):
            ack = self.channel.roundtrip(shard_id, broadcast)
            if isinstance(ack, ControlError):
                raise ProtocolError(f"shard {shard_id}: {ack.message}")
        return pair_count

    def _request_with_retry(
        self, shard_id: int, request: MinibatchRequest
    ) -> PartialDotsResponse:
        # A request provokes no state change beyond the (idempotent)
        # batch cache, so one retry after a lost response is safe.
        try:
            response = self.channel.roundtrip(shard_id, request)
        except TransportError:
            logger.warning(
                "batch %d: shard %d response missing, retrying once",
                request.batch_id, shard_id,
            )
            response = self.channel.roundtrip(shard_id, request)
        if isinstance(response, ControlError):
            raise ProtocolError(
                f"shard {shard_id} rejected batch {request.batch_id}: {response.message}"
            )
        if not isinstance(response, PartialDotsResponse):
            raise ProtocolError(f"unexpected response {type(response).__name__}")
        return response


def run_distributed(
    sessions: Sequence[Session],
    config: TrainingConfig,
    n_shards: int,
    n_clients: int = 1,
    transport: "str | InProcessTransport | SocketTransport" = "memory",
    vocab: Vocabulary | None = None,
    serialize_batches: bool | None = None,
) -> tuple[EmbeddingTable, Vocabulary, list[dict]]:
    """Train over PS shards; returns (table, vocab, epoch history).

    ``transport`` is "memory", "socket", or a callable taking the shard
    list and returning a transport (a seam for fault injection). With
    ``serialize_batches`` (implied by a single client) batches execute
    one at a time in the global round-robin order, making the run
    reproducible.
    """
    sessions = list(sessions)
    if vocab is None:
        vocab = build_vocabulary(sessions, config.min_count)
    if len(vocab) == 0:
        raise ValueError("empty vocabulary: nothing to train")
    if n_clients < 1:
        raise ValueError(f"need at least one client, got {n_clients}")

    sampler = NegativeSampler(
        vocab.counts, uniform=config.negative_sampling == "uniform"
    )
    table = init_embeddings(vocab, config.dim, config.seed)
    if config.epochs == 0:
        return table, vocab, []
    shards = make_shards(table, n_shards, sampler)

    if transport == "memory":
        transport = InProcessTransport(shards)
    elif transport == "socket":
        transport = SocketTransport(shards)
    elif callable(transport):
        transport = transport(shards)
    else:
        raise ValueError(f"unknown transport {transport!r}")

    serialize = bool(serialize_batches) or n_clients == 1
    total_pairs = count_scheduled_pairs(sessions, vocab, config)
    history: list[dict] = []
    checkpoint: EmbeddingTable | None = None
    last_completed = -1

    try:
        contexts = [
            _ClientContext(sessions, vocab, config, transport.channel(), n_shards,
                           total_pairs)
            for _ in range(n_clients)
        ]
        control = contexts[0].channel
        for epoch in range(config.epochs):
            order = epoch_order(len(sessions), config, epoch)
            client_batches, global_order = _batch_layout(
                len(order), n_clients, config.batch_sessions
            )
            global_index = {pair: i for i, pair in enumerate(global_order)}
            epoch_pairs = 0
            if serialize:
                for client_id, batch_k in global_order:
                    epoch_pairs += contexts[client_id].run_batch(
                        epoch, order, client_batches[client_id][batch_k],
                        global_index[(client_id, batch_k)],
                    )
            else:
                counts = [0] * n_clients
                errors: list[BaseException] = []

                def drive(client_id: int) -> None:
                    try:
                        for batch_k, positions in enumerate(client_batches[client_id]):
                            counts[client_id] += contexts[client_id].run_batch(
                                epoch, order, positions,
                                global_index[(client_id, batch_k)],
                            )
                    except BaseException as exc:  # noqa: BLE001 - reported below
                        errors.append(exc)

                threads = [
                    threading.Thread(target=drive, args=(c,)) for c in range(n_clients)
                ]
                for thread in threads:
                    thread.start()
                for thread in threads:
                    thread.join()
                if errors:
                    raise errors[0]
                epoch_pairs = sum(counts)

            slices = []
            for shard_id in range(n_shards):
                data = control.roundtrip(shard_id, FetchSlice())
                if not isinstance(data, SliceData):
                    raise ProtocolError(f"bad slice response from shard {shard_id}")
                slices.append(data)
            checkpoint = assemble_table(slices)
            last_completed = epoch

            probe = _epoch_probe(sessions, order, client_batches, global_order,
                                 vocab, config, epoch)
            record = {
                "epoch": epoch,
                "pairs": epoch_pairs,
                "objective_sample": (
                    objective_value(checkpoint, probe) if probe is not None else 0.0
                ),
                "alpha": float(
                    alpha_schedule(
                        _allocated_so_far(control), 1, total_pairs, config
                    )[0]
                ),
            }
            history.append(record)
            logger.info(
                "ps epoch=%d pairs=%d objective_sample=%.6f alpha=%.6f",
                record["epoch"], record["pairs"],
                record["objective_sample"], record["alpha"],
            )
    except (TransportError, ProtocolError, OSError) as exc:
        raise TrainingAborted(str(exc), last_completed, checkpoint) from exc
    finally:
        transport.close()

    assert checkpoint is not None
    return checkpoint, vocab, history


def _allocated_so_far(channel: Channel) -> int:
    result = channel.roundtrip(0, AllocRequest(0))
    return result.start if isinstance(result, AllocResult) else 0


def _epoch_probe(sessions, order, client_batches, global_order, vocab, config, epoch):
    """Objective probe: the first non-empty batch in global order."""
    for client_id, batch_k in global_order:
        batch = request_batch(
            sessions, order, client_batches[client_id][batch_k], vocab, config, epoch
        )
        if len(batch):
            return probe_pairs(batch)
    return None


class ParameterServerEmbedder(BaseEstimator):
    """Estimator facade over the distributed trainer."""

    def __init__(
        self,
        dim: int = 300,
        window: int = 5,
        negatives: int = 5,
        epochs: int = 10,
        alpha: float = 0.025,
        min_alpha: float = 1e-4,
        subsample: float = 1e-5,
        min_count: int = 10,
        batch_sessions: int = 200,
        negative_sampling: str = "unigram",
        use_implicit_negatives: bool = True,
        shuffle: bool = True,
        seed: int = 42,
        shards: int = 4,
        clients: int = 1,
        transport: str = "memory",
        serialize_batches: bool | None = None,
    ):
        self.dim = dim
        self.window = window
        self.negatives = negatives
        self.epochs = epochs
        self.alpha = alpha
        self.min_alpha = min_alpha
        self.subsample = subsample
        self.min_count = min_count
        self.batch_sessions = batch_sessions
        self.negative_sampling = negative_sampling
        self.use_implicit_negatives = use_implicit_negatives
        self.shuffle = shuffle
        self.seed = seed
        self.shards = shards
        self.clients = clients
        self.transport = transport
        self.serialize_batches = serialize_batches

    def _make_config(self) -> TrainingConfig:
        return TrainingConfig(
            dim=self.dim,
            window=self.window,
            negatives=self.negatives,
            epochs=self.epochs,
            alpha=self.alpha,
            min_alpha=self.min_alpha,
            subsample=self.subsample,
            min_count=self.min_count,
            batch_sessions=self.batch_sessions,
            negative_sampling=self.negative_sampling,
            use_implicit_negatives=self.use_implicit_negatives,
            shuffle=self.shuffle,
            seed=self.seed,
        )

    def fit(self, X: Sequence[Session], y=None) -> "ParameterServerEmbedder":
        table, vocab, history = run_distributed(
            list(X),
            self._make_config(),
            n_shards=self.shards,
            n_clients=self.clients,
            transport=self.transport,
            serialize_batches=self.serialize_batches,
        )
        self.table_ = table
        self.vocabulary_ = vocab
        self.history_ = history
        return self

    def transform(self, tokens: Sequence[str]) -> np.ndarray:
        check_is_fitted(self, "table_")
        rows = []
        for token in tokens:
            token_id = self.vocabulary_.id_of(token)
            if token_id is None:
                raise ValueError(f"unknown token {token!r}")
            rows.append(token_id)
        return self.table_.input_vectors[rows]
