"""Server-side federation protocol.

The round lifecycle is a pure state machine: clients join, the server
broadcasts the current global model, waits for every roster client's weight
delta (a synchronous barrier), aggregates with iteration-count weights, and
broadcasts the next round. Messages travel as self-delimiting binary frames
so the same state machine serves both the in-process and the TCP transport.

Frame layout: [magic "FKFL"][u16 version][u16 msg_type][u32 payload_len]
[payload], little-endian; parameter payloads reuse the ParamVector file
layout.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from typing import List, Optional, Tuple, Union

import numpy as np

from .config import FederationConfig
from .errors import BadMagic, DuplicateClient, InvalidConfig, NoUpdates, \
    SpecMismatch, StaleUpdate, Truncated, UnknownClient, VersionMismatch
from .nn import ParamVector, params_from_bytes, params_to_bytes

FRAME_MAGIC = b"FKFL"
PROTOCOL_VERSION = 1
_FRAME_HEADER = struct.Struct("<4sHHI")

MSG_JOIN = 1
MSG_JOIN_ACK = 2
MSG_MODEL_BROADCAST = 3
MSG_DELTA_SUBMIT = 4
MSG_ROUND_COMPLETE = 5
MSG_SHUTDOWN = 6


# ---------------------------------------------------------------------------
# Messages
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Join:
    client_id: str
    protocol_version: int = PROTOCOL_VERSION


@dataclass(frozen=True)
class JoinAck:
    config: FederationConfig


@dataclass(frozen=True)
class ModelBroadcast:
    round_index: int
    params: ParamVector


@dataclass(frozen=True)
class ClientUpdate:
    client_id: str
    delta: ParamVector
    n_k: int

    def __post_init__(self):
        if self.n_k < 1:
            raise InvalidConfig("n_k must be >= 1")


@dataclass(frozen=True)
class DeltaSubmit:
    round_index: int
    update: ClientUpdate


@dataclass(frozen=True)
class RoundComplete:
    round_index: int


@dataclass(frozen=True)
class Shutdown:
    reason: str


Message = Union[Join, JoinAck, ModelBroadcast, DeltaSubmit, RoundComplete,
                Shutdown]


# ---------------------------------------------------------------------------
# Codec
# ---------------------------------------------------------------------------

def _pack_str(text: str) -> bytes:
    raw = text.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def _unpack_str(raw: bytes, offset: int) -> Tuple[str, int]:
    if offset + 2 > len(raw):
        raise Truncated("string length field missing")
    (length,) = struct.unpack_from("<H", raw, offset)
    offset += 2
    if offset + length > len(raw):
        raise Truncated("string payload missing")
    return raw[offset:offset + length].decode("utf-8"), offset + length


def encode_message(msg: Message) -> bytes:
    if isinstance(msg, Join):
        msg_type = MSG_JOIN
        payload = _pack_str(msg.client_id) + struct.pack("<H", msg.protocol_version)
    elif isinstance(msg, JoinAck):
        msg_type = MSG_JOIN_ACK
        raw = msg.config.to_json().encode("utf-8")
        payload = struct.pack("<I", len(raw)) + raw
    elif isinstance(msg, ModelBroadcast):
        msg_type = MSG_MODEL_BROADCAST
        payload = struct.pack("<I", msg.round_index) + params_to_bytes(msg.params)
    elif isinstance(msg, DeltaSubmit):
        msg_type = MSG_DELTA_SUBMIT
        payload = (struct.pack("<I", msg.round_index)
                   + _pack_str(msg.update.client_id)
                   + struct.pack("<I", msg.update.n_k)
                   + params_to_bytes(msg.update.delta))
    elif isinstance(msg, RoundComplete):
        msg_type = MSG_ROUND_COMPLETE
        payload = struct.pack("<I", msg.round_index)
    elif isinstance(msg, Shutdown):
        msg_type = MSG_SHUTDOWN
        payload = _pack_str(msg.reason)
    else:
        raise InvalidConfig(f"cannot encode {type(msg).__name__}")
    header = _FRAME_HEADER.pack(FRAME_MAGIC, PROTOCOL_VERSION, msg_type,
                                len(payload))
    return header + payload


def decode_frame_header(raw: bytes) -> Tuple[int, int]:
    """Validate a frame header; returns (msg_type, payload_len)."""
    if len(raw) < _FRAME_HEADER.size:
        raise Truncated("frame header incomplete")
    magic, version, msg_type, payload_len = _FRAME_HEADER.unpack_from(raw)
    if magic != FRAME_MAGIC:
        raise BadMagic(f"expected {FRAME_MAGIC!r}, got {magic!r}")
    if version != PROTOCOL_VERSION:
        raise VersionMismatch(f"protocol version {version} unsupported")
    return msg_type, payload_len


def decode_payload(msg_type: int, payload: bytes) -> Message:
    if msg_type == MSG_JOIN:
        client_id, offset = _unpack_str(payload, 0)
        if offset + 2 > len(payload):
            raise Truncated("join payload missing version")
        (version,) = struct.unpack_from("<H", payload, offset)
        return Join(client_id, version)
    if msg_type == MSG_JOIN_ACK:
        if len(payload) < 4:
            raise Truncated("config length missing")
        (length,) = struct.unpack_from("<I", payload, 0)
        if 4 + length > len(payload):
            raise Truncated("config payload missing")
        return JoinAck(FederationConfig.from_json(
            payload[4:4 + length].decode("utf-8")))
    if msg_type == MSG_MODEL_BROADCAST:
        if len(payload) < 4:
            raise Truncated("broadcast round index missing")
        (round_index,) = struct.unpack_from("<I", payload, 0)
        return ModelBroadcast(round_index, params_from_bytes(payload[4:]))
    if msg_type == MSG_DELTA_SUBMIT:
        if len(payload) < 4:
            raise Truncated("submit round index missing")
        (round_index,) = struct.unpack_from("<I", payload, 0)
        client_id, offset = _unpack_str(payload, 4)
        if offset + 4 > len(payload):
            raise Truncated("submit n_k missing")
        (n_k,) = struct.unpack_from("<I", payload, offset)
        delta = params_from_bytes(payload[offset + 4:])
        return DeltaSubmit(round_index, ClientUpdate(client_id, delta, n_k))
    if msg_type == MSG_ROUND_COMPLETE:
        if len(payload) < 4:
            raise Truncated("round index missing")
        (round_index,) = struct.unpack_from("<I", payload, 0)
        return RoundComplete(round_index)
    if msg_type == MSG_SHUTDOWN:
        reason, _ = _unpack_str(payload, 0)
        return Shutdown(reason)
    raise VersionMismatch(f"unsupported message type {msg_type}")


def decode_message(raw: bytes) -> Tuple[Message, int]:
    """Decode one frame from the head of `raw`; returns (message, consumed)."""
    msg_type, payload_len = decode_frame_header(raw)
    end = _FRAME_HEADER.size + payload_len
    if len(raw) < end:
        raise Truncated(
            f"frame declares {payload_len} payload bytes, got "
            f"{len(raw) - _FRAME_HEADER.size}")
    return decode_payload(msg_type, raw[_FRAME_HEADER.size:end]), end


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------

def aggregate(global_prev: ParamVector, updates: List[ClientUpdate]) -> ParamVector:
    """Iteration-weighted federated average.

    Returns phi_prev + sum_k (n_k / sum n) * delta_k, accumulated in float64
    in the given (roster) order. Normalizing the weights first makes the
    result bit-invariant to scaling every n_k by a common factor.
    """
    if not updates:
        raise NoUpdates("aggregate requires at least one client update")
    n = global_prev.values.shape[0]
    for upd in updates:
        if upd.delta.values.shape[0] != n:
            raise SpecMismatch(
                f"update from {upd.client_id!r} has length "
                f"{upd.delta.values.shape[0]}, expected {n}")
        if upd.delta.spec_hash != global_prev.spec_hash:
            raise SpecMismatch(
                f"update from {upd.client_id!r} built for a different spec")
    total = sum(int(upd.n_k) for upd in updates)
    acc = np.zeros(n, dtype=np.float64)
    for upd in updates:
        weight = np.float64(int(upd.n_k)) / np.float64(total)
        acc += weight * upd.delta.values.astype(np.float64)
    merged = (global_prev.values.astype(np.float64) + acc).astype(np.float32)
    return ParamVector(merged, global_prev.spec_hash)


def apply_update(global_prev: ParamVector, delta: ParamVector) -> ParamVector:
    """Reconstruct a client's round model: phi_prev + delta (float64 sum)."""
    if delta.spec_hash != global_prev.spec_hash:
        raise SpecMismatch("delta built for a different spec")
    merged = (global_prev.values.astype(np.float64)
              + delta.values.astype(np.float64)).astype(np.float32)
    return ParamVector(merged, global_prev.spec_hash)


# ---------------------------------------------------------------------------
# Server state machine
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RoundState:
    """Immutable server state; server_step maps (state, message) -> state.

    phase: "joining" until every roster client joined, then "training"
    through rounds 1..T, then "done". During training, `pending` holds the
    clients whose delta for `round_index` has not arrived; aggregation fires
    only when it empties.
    """

    config: FederationConfig
    phase: str = "joining"
    round_index: int = 0
    global_params: Optional[ParamVector] = None
    joined: tuple = ()
    pending: frozenset = frozenset()
    received: tuple = ()
    final_params: Optional[ParamVector] = None


def initial_state(config: FederationConfig,
                  init_params: ParamVector) -> RoundState:
    return RoundState(config=config, phase="joining", round_index=0,
                      global_params=init_params)


def _broadcast(state: RoundState, msg: Message) -> List[Tuple[str, Message]]:
    return [(client_id, msg) for client_id in state.config.roster]


def server_step(state: RoundState, sender: str,
                msg: Message) -> Tuple[RoundState, List[Tuple[str, Message]]]:
    """Advance the state machine by one message.

    Returns (new_state, outbound) where outbound is a list of
    (destination client_id, message). Raises the designated protocol error
    and leaves the state unchanged for invalid messages.
    """
    if isinstance(msg, Join):
        if msg.protocol_version != PROTOCOL_VERSION:
            raise VersionMismatch(
                f"client {sender!r} speaks version {msg.protocol_version}")
        if msg.client_id not in state.config.roster:
            raise UnknownClient(f"{msg.client_id!r} is not on the roster")
        if msg.client_id in state.joined:
            raise DuplicateClient(f"{msg.client_id!r} already joined")
        if state.phase != "joining":
            raise StaleUpdate("join after the federation started")
        joined = state.joined + (msg.client_id,)
        outbound = [(msg.client_id, JoinAck(state.config))]
        if set(joined) == set(state.config.roster):
            new_state = replace(state, phase="training", round_index=1,
                                joined=joined,
                                pending=frozenset(state.config.roster),
                                received=())
            outbound += _broadcast(new_state,
                                   ModelBroadcast(1, state.global_params))
            return new_state, outbound
        return replace(state, joined=joined), outbound

    if isinstance(msg, DeltaSubmit):
        if state.phase != "training":
            raise StaleUpdate(f"no round in progress (phase {state.phase})")
        update = msg.update
        if update.client_id not in state.config.roster:
            raise UnknownClient(f"{update.client_id!r} is not on the roster")
        if msg.round_index != state.round_index:
            raise StaleUpdate(
                f"submission for round {msg.round_index}, server is in round "
                f"{state.round_index}")
        if update.client_id not in state.pending:
            raise DuplicateClient(
                f"{update.client_id!r} already submitted for round "
                f"{state.round_index}")
        pending = state.pending - {update.client_id}
        received = state.received + (update,)
        if pending:
            return replace(state, pending=pending, received=received), []

        # barrier complete: aggregate in roster order
        by_id = {u.client_id: u for u in received}
        ordered = [by_id[cid] for cid in state.config.roster]
        new_global = aggregate(state.global_params, ordered)
        t = state.round_index
        outbound = _broadcast(state, RoundComplete(t))
        if t >= state.config.rounds:
            new_state = replace(state, phase="done", round_index=t,
                                global_params=new_global,
                                final_params=new_global,
                                pending=frozenset(), received=tuple(ordered))
            outbound += _broadcast(new_state, Shutdown("complete"))
        else:
            new_state = replace(state, round_index=t + 1,
                                global_params=new_global,
                                pending=frozenset(state.config.roster),
                                received=())
            outbound += _broadcast(new_state, ModelBroadcast(t + 1, new_global))
        return new_state, outbound

    raise InvalidConfig(
        f"server cannot handle {type(msg).__name__} from {sender!r}")
