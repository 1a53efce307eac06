"""Client process for wire-mode experiments."""

from __future__ import annotations

import logging
import socket
import time

import numpy as np

from fedpoison.config import ExperimentConfig, from_dict
from fedpoison.data import Dataset, Standardizer
from fedpoison.errors import FedPoisonError, ProtocolError
from fedpoison.model import ParamSet
from fedpoison.orchestrator import ClientState, client_round, load_dataset, setup_client
from fedpoison.seeds import derive_seeds
from fedpoison.transport import codec
from fedpoison.transport.codec import (
    ClientUpdateMsg,
    Error,
    GlobalModel,
    Join,
    JoinAck,
    RoundMetrics,
    Shutdown,
)
from fedpoison.transport.server import parse_addr

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_VERSION = 2

DEFAULT_BACKOFF = (1.0, 2.0, 4.0)


def _open(addr) -> socket.socket:
    sock = socket.create_connection(addr, timeout=10.0)
    sock.settimeout(None)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return sock


def _local_state(ack: JoinAck, data_path: str | None, dataset: Dataset | None) -> tuple[ExperimentConfig, ClientState, tuple]:
    info = ack.info
    cid = int(info["client_id"])
    config = from_dict(info["config"])
    seeds = derive_seeds(config.master_seed)
    rows = np.asarray(info["shard_rows"], dtype=np.int64)
    if info.get("shipped"):
        X, y = codec.unpack_shard(ack.blob)
        shard = Dataset(X, y, int(info["n_classes"]))
    else:
        if dataset is None:
            if data_path is not None:
                config_for_load = config.with_updates(**{"data.path": data_path})
            else:
                config_for_load = config
            dataset = load_dataset(config_for_load, seeds)
        std = Standardizer.from_dict(info["standardizer"])
        shard = std.transform(dataset.subset(rows))
    state, _ = setup_client(cid, shard, rows, config, seeds)
    return config, state, tuple(info["dims"])


def _handshake(sock, client_id: int) -> tuple[object, int]:
    codec.send_message(sock, Join(client_id))
    frame = codec.recv_frame(sock)
    if frame.version != codec.PROTOCOL_VERSION:
        return None, frame.version
    return codec.from_frame(frame), frame.version


def client_loop(
    server_addr,
    client_id: int,
    data_path: str | None = None,
    dataset: Dataset | None = None,
    backoff=DEFAULT_BACKOFF,
) -> int:
    """Join, train on every GLOBAL_MODEL, and return a process exit status.

    ``dataset`` (unstandardized, full table) or ``data_path`` override the data
    source named in the server's config; shipped shards need neither.
    """
    addr = parse_addr(server_addr)
    retries = 0

    def retry(reason) -> bool:
        # one budget for failed connects and dropped sessions alike
        nonlocal retries
        if retries >= len(backoff):
            log.error("client %d: %s; giving up after %d retries", client_id, reason, retries)
            return False
        log.warning("client %d: %s; retrying in %gs", client_id, reason, backoff[retries])
        time.sleep(backoff[retries])
        retries += 1
        return True

    while True:
        try:
            sock = _open(addr)
        except OSError as exc:
            if retry(f"cannot reach {addr[0]}:{addr[1]} ({exc})"):
                continue
            return EXIT_FAILURE
        try:
            reply, version = _handshake(sock, client_id)
            if reply is None:
                log.error("client %d: server speaks protocol version %d, expected %d",
                          client_id, version, codec.PROTOCOL_VERSION)
                return EXIT_VERSION
            if isinstance(reply, Shutdown):
                return EXIT_OK
            if isinstance(reply, Error):
                log.error("client %d: join rejected (%d): %s", client_id, reply.code, reply.message)
                return EXIT_FAILURE
            if not isinstance(reply, JoinAck):
                log.error("client %d: expected JOIN_ACK, got %s", client_id, type(reply).__name__)
                return EXIT_FAILURE
            config, state, dims = _local_state(reply, data_path, dataset)
            return _serve_rounds(sock, state, config, derive_seeds(config.master_seed), dims)
        except (ConnectionError, OSError) as exc:
            if retry(f"connection lost ({exc})"):
                continue
            return EXIT_FAILURE
        except (ProtocolError, FedPoisonError) as exc:
            log.error("client %d: %s", client_id, exc)
            return EXIT_FAILURE
        finally:
            sock.close()


def _serve_rounds(sock, state: ClientState, config, seeds, dims) -> int:
    rounds = 0
    while True:
        frame = codec.recv_frame(sock)
        if frame.version != codec.PROTOCOL_VERSION:
            log.error("client %d: protocol version %d mid-session", state.client_id, frame.version)
            return EXIT_VERSION
        try:
            msg = codec.from_frame(frame)
        except codec.UnknownMessage as exc:
            log.warning("client %d: ignoring %s", state.client_id, exc)
            continue
        if isinstance(msg, Shutdown):
            log.info("client %d: shutdown after %d rounds", state.client_id, rounds)
            return EXIT_OK
        if isinstance(msg, Error):
            log.error("client %d: server error %d: %s", state.client_id, msg.code, msg.message)
            return EXIT_FAILURE
        if not isinstance(msg, GlobalModel):
            log.warning("client %d: ignoring unexpected %s", state.client_id, type(msg).__name__)
            continue
        params = ParamSet(msg.params, dims)
        update, m = client_round(state, params, config, seeds, msg.round)
        codec.send_message(sock, ClientUpdateMsg(msg.round, update.params, update.n_samples, state.client_id))
        codec.send_message(
            sock, RoundMetrics(msg.round, state.client_id, m.loss, m.accuracy, m.f1, m.epochs_run, m.n_samples)
        )
        rounds += 1
