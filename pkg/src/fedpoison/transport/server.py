"""Coordinator process for wire-mode experiments.

One thread accepts connections and one reader thread per connection decodes
frames; both only post events to a queue. The coordinator (the thread calling
``Server.run``) owns all round state, sends every outgoing message and
aggregates only once it holds an update and metrics from every client.
"""

from __future__ import annotations

import logging
import queue
import socket
import threading
import time
from dataclasses import dataclass, field

from fedpoison.config import ExperimentConfig
from fedpoison.data import Dataset
from fedpoison.errors import ConfigError, ProtocolError
from fedpoison.federation import ClientUpdate
from fedpoison.model import ParamSet, evaluate, init_params
from fedpoison.metrics import f1_score
from fedpoison.orchestrator import (
    ClientMetrics,
    ExperimentReport,
    finish_round,
    model_dims,
    prepare,
)
from fedpoison.seeds import derive_seeds
from fedpoison.transport import codec
from fedpoison.transport.codec import (
    ClientUpdateMsg,
    Error,
    ErrorCode,
    GlobalModel,
    Join,
    JoinAck,
    RoundMetrics,
    Shutdown,
)

log = logging.getLogger(__name__)

DEFAULT_PORT = 9099


def parse_addr(addr, default_host: str = "127.0.0.1") -> tuple[str, int]:
    if isinstance(addr, tuple):
        return addr[0], int(addr[1])
    host, _, port = str(addr).rpartition(":")
    return host or default_host, int(port) if port else DEFAULT_PORT


class _Conn:
    def __init__(self, conn_id: int, sock: socket.socket, peer):
        self.conn_id = conn_id
        self.sock = sock
        self.peer = peer
        self.client_id: int | None = None
        self._send_lock = threading.Lock()
        self.closed = False

    def send(self, msg) -> bool:
        with self._send_lock:
            if self.closed:
                return False
            try:
                codec.send_message(self.sock, msg)
                return True
            except OSError as exc:
                log.debug("send to %s failed: %s", self.peer, exc)
                return False

    def close(self):
        with self._send_lock:
            if not self.closed:
                self.closed = True
                try:
                    self.sock.shutdown(socket.SHUT_RDWR)
                except OSError:
                    pass
                self.sock.close()


@dataclass
class _Event:
    kind: str  # "conn" | "msg" | "closed"
    conn: _Conn
    msg: object = None
    reason: str = ""


@dataclass
class _RoundInbox:
    updates: dict[int, ClientUpdate] = field(default_factory=dict)
    metrics: dict[int, ClientMetrics] = field(default_factory=dict)

    def complete(self, n: int) -> bool:
        return len(self.updates) == n and len(self.metrics) == n


class _Abort(Exception):
    pass


class Server:
    """Bind on construction so callers can read ``address`` before ``run``."""

    def __init__(self, config: ExperimentConfig, listen_addr=("127.0.0.1", DEFAULT_PORT), dataset: Dataset | None = None):
        if config.n_clients < 1:
            raise ConfigError("n_clients must be >= 1")
        self.config = config
        self._dataset = dataset
        self._events: queue.Queue[_Event] = queue.Queue()
        self._listener = socket.create_server(parse_addr(listen_addr), reuse_port=False)
        self._listener.settimeout(0.2)
        self._stop = threading.Event()
        self._conns: list[_Conn] = []
        self._next_conn = 0

    @property
    def address(self) -> tuple[str, int]:
        return self._listener.getsockname()[:2]

    # -- connection plumbing -------------------------------------------------

    def _accept_loop(self):
        while not self._stop.is_set():
            try:
                sock, peer = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            conn = _Conn(self._next_conn, sock, peer)
            self._next_conn += 1
            self._events.put(_Event("conn", conn))
            threading.Thread(target=self._read_loop, args=(conn,), daemon=True).start()

    def _read_loop(self, conn: _Conn):
        while True:
            try:
                frame = codec.recv_frame(conn.sock)
            except (ConnectionError, OSError) as exc:
                self._events.put(_Event("closed", conn, reason=str(exc)))
                return
            except ProtocolError as exc:
                self._events.put(_Event("closed", conn, reason=f"protocol error: {exc}"))
                conn.close()
                return
            try:
                msg = codec.from_frame(frame)
            except codec.UnknownMessage as exc:
                conn.send(Error(ErrorCode.UNKNOWN_MESSAGE, str(exc)))
                continue
            except ProtocolError as exc:
                conn.send(Error(ErrorCode.UNEXPECTED, str(exc)))
                continue
            self._events.put(_Event("msg", conn, msg))

    def _next_event(self, deadline: float) -> _Event:
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            raise queue.Empty
        return self._events.get(timeout=remaining)

    # -- protocol --------------------------------------------------------------

    def _join_ack(self, client_id: int) -> JoinAck:
        cfg = self.config
        rows = self._prep.shards[client_id]
        info = {
            "client_id": client_id,
            "n_clients": cfg.n_clients,
            "config": cfg.model_dump(mode="json"),
            "dims": list(self._dims),
            "shard_rows": rows.tolist(),
            "standardizer": self._prep.standardizer.to_dict(),
            "victim": bool(cfg.attack.enabled and client_id == cfg.attack.victim_client_id),
            "shipped": cfg.data.ship_data,
        }
        blob = b""
        if cfg.data.ship_data:
            shard = self._prep.dataset.subset(rows)
            blob = codec.pack_shard(shard.X, shard.y)
            info["n_classes"] = shard.c
        return JoinAck(info, blob)

    def _handle_join(self, ev: _Event, joined: dict[int, _Conn], accepting: bool):
        cid = ev.msg.client_id
        if not accepting:
            ev.conn.send(Error(ErrorCode.DUPLICATE_CLIENT if cid in joined else ErrorCode.UNEXPECTED,
                               "experiment already running"))
            ev.conn.close()
        elif not 0 <= cid < self.config.n_clients:
            ev.conn.send(Error(ErrorCode.BAD_CLIENT_ID, f"client id {cid} outside [0, {self.config.n_clients})"))
            ev.conn.close()
        elif cid in joined:
            ev.conn.send(Error(ErrorCode.DUPLICATE_CLIENT, f"client id {cid} already joined"))
            ev.conn.close()
        else:
            ev.conn.client_id = cid
            joined[cid] = ev.conn
            ev.conn.send(self._join_ack(cid))
            log.info("client %d joined from %s (%d/%d)", cid, ev.conn.peer, len(joined), self.config.n_clients)

    def _await_joins(self) -> dict[int, _Conn]:
        joined: dict[int, _Conn] = {}
        deadline = time.monotonic() + self.config.timeout_s
        while len(joined) < self.config.n_clients:
            try:
                ev = self._next_event(deadline)
            except queue.Empty:
                raise _Abort(f"only {len(joined)} of {self.config.n_clients} clients joined before timeout")
            if ev.kind == "conn":
                self._conns.append(ev.conn)
            elif ev.kind == "closed":
                if ev.conn.client_id is not None and joined.get(ev.conn.client_id) is ev.conn:
                    del joined[ev.conn.client_id]
                    log.warning("client %d left before the experiment started", ev.conn.client_id)
            elif isinstance(ev.msg, Join):
                self._handle_join(ev, joined, accepting=True)
            else:
                ev.conn.send(Error(ErrorCode.UNEXPECTED, "send JOIN first"))
        return joined

    def _collect(self, round_idx: int, joined: dict[int, _Conn]) -> _RoundInbox:
        inbox = _RoundInbox()
        n = self.config.n_clients
        deadline = time.monotonic() + self.config.timeout_s
        while not inbox.complete(n):
            try:
                ev = self._next_event(deadline)
            except queue.Empty:
                missing = sorted(set(range(n)) - set(inbox.updates))
                raise _Abort(f"round {round_idx} timed out waiting for clients {missing}")
            if ev.kind == "conn":
                self._conns.append(ev.conn)
                continue
            cid = ev.conn.client_id
            if ev.kind == "closed":
                if cid is not None and joined.get(cid) is ev.conn:
                    raise _Abort(f"client {cid} disconnected in round {round_idx}: {ev.reason}")
                continue
            msg = ev.msg
            if isinstance(msg, Join):
                self._handle_join(ev, joined, accepting=False)
            elif cid is None or joined.get(cid) is not ev.conn:
                ev.conn.send(Error(ErrorCode.UNEXPECTED, "not joined"))
            elif isinstance(msg, ClientUpdateMsg) and msg.round == round_idx and msg.client_id == cid:
                if msg.params.size != self._param_count:
                    raise _Abort(f"client {cid} sent {msg.params.size} params, expected {self._param_count}")
                inbox.updates[cid] = ClientUpdate(cid, msg.params, int(msg.n_samples))
            elif isinstance(msg, RoundMetrics) and msg.round == round_idx and msg.client_id == cid:
                inbox.metrics[cid] = ClientMetrics(cid, msg.loss, msg.accuracy, msg.f1, msg.n_samples, msg.epochs_run)
            elif isinstance(msg, Error):
                raise _Abort(f"client {cid} reported error {msg.code}: {msg.message}")
            else:
                ev.conn.send(Error(ErrorCode.UNEXPECTED, f"unexpected {type(msg).__name__} in round {round_idx}"))
        return inbox

    def run(self) -> ExperimentReport:
        start = time.perf_counter()
        cfg = self.config
        seeds = derive_seeds(cfg.master_seed)
        self._prep = prepare(cfg, seeds, self._dataset)
        self._dims = model_dims(cfg, self._prep.dataset)
        test = self._prep.test
        global_params = init_params(self._dims, seeds.init)
        self._param_count = global_params.flat.size
        loss, acc, preds = evaluate(global_params, test)
        initial = (loss, acc, f1_score(preds, test.y, test.c, cfg.metrics.f1_average))
        report = ExperimentReport(cfg, [], global_params, [], initial, mode="wire")

        accept = threading.Thread(target=self._accept_loop, daemon=True)
        accept.start()
        joined: dict[int, _Conn] = {}
        round_idx = 0
        try:
            joined = self._await_joins()
            for round_idx in range(1, cfg.rounds + 1):
                for cid in sorted(joined):
                    if not joined[cid].send(GlobalModel(round_idx, global_params.flat, cid)):
                        raise _Abort(f"could not reach client {cid} in round {round_idx}")
                inbox = self._collect(round_idx, joined)
                global_params, record = finish_round(
                    inbox.updates.values(), inbox.metrics.values(), global_params, cfg, round_idx, test
                )
                report.rounds.append(record)
                report.final_params = global_params
                log.info("round %d: test acc %.4f", round_idx, record.test_accuracy)
            for conn in joined.values():
                conn.send(Shutdown())
        except _Abort as exc:
            log.error("experiment aborted: %s", exc)
            report.complete = False
            report.incomplete_round = round_idx
            for conn in joined.values():
                conn.send(Error(ErrorCode.ABORTED, str(exc)))
        finally:
            self.close()
        report.wall_time = time.perf_counter() - start
        return report

    def close(self):
        self._stop.set()
        try:
            self._listener.close()
        except OSError:
            pass
        for conn in self._conns:
            conn.close()


def serve(config: ExperimentConfig, listen_addr=("127.0.0.1", DEFAULT_PORT), dataset: Dataset | None = None) -> ExperimentReport:
    return Server(config, listen_addr, dataset).run()
