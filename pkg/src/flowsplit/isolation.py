"""Isolation layer: an authenticated end-to-end channel between host identities.

Packet layout is ``seq u64 | mac 16 | payload``. The MAC is HMAC-SHA256
truncated to 16 bytes over the header (mac zeroed) and the payload as sent,
so with the optional XOR cipher the MAC covers ciphertext.

Sequence number 0 is reserved for handshake messages. The handshake is
plumbing only: it derives distinct per-direction keys from both public values
and nonces, but offers no secrecy against an eavesdropper.
"""

from __future__ import annotations

import hashlib
import hmac
import struct
from dataclasses import dataclass
from enum import Enum

from .flow import FlowCondition, FlowSection, FlowUser
from .flowcc import LossKind
from .sim.engine import Timer

HEADER = struct.Struct(">Q16s")
HEADER_SIZE = 24
MAC_SIZE = 16
PUB_SIZE = 32
NONCE_SIZE = 16
REPLAY_WINDOW = 64
ZERO_MAC = bytes(MAC_SIZE)

MSG_INIT = 0x01
MSG_RESPONSE = 0x02
HANDSHAKE_ATTEMPTS = 3

LABEL_I2R = b"initiator->responder"
LABEL_R2I = b"responder->initiator"


class Rejected(Enum):
    BAD_MAC = "bad_mac"
    REPLAY = "replay"
    WINDOW_TOO_OLD = "window_too_old"


class ChannelCondition(Enum):
    NEGOTIATING = "negotiating"
    ACTIVE = "active"
    STALLED = "stalled"
    FAILED = "failed"


class ChannelFailed(RuntimeError):
    pass


class NegotiationFailed(RuntimeError):
    pass


class IdentityMismatch(ValueError):
    pass


@dataclass(frozen=True)
class HostIdentity:
    """A host's long-term public value and its digest, the identity proper."""

    pub: bytes

    @property
    def id(self) -> bytes:
        return identity_of(self.pub)

    def short(self) -> str:
        return self.id.hex()[:8]


def identity_of(pub: bytes) -> bytes:
    return hashlib.sha256(pub).digest()


def mac(key: bytes, seq: int, payload: bytes) -> bytes:
    return hmac.new(key, HEADER.pack(seq, ZERO_MAC) + payload, hashlib.sha256).digest()[:MAC_SIZE]


def keystream(key: bytes, seq: int, n: int) -> bytes:
    return hashlib.shake_256(key + seq.to_bytes(8, "big")).digest(n)


def xor_cipher(key: bytes, seq: int, data: bytes) -> bytes:
    if not data:
        return data
    ks = keystream(key, seq, len(data))
    return (int.from_bytes(data, "big") ^ int.from_bytes(ks, "big")).to_bytes(len(data), "big")


def derive_keys(pub_a: bytes, pub_b: bytes, nonce_a: bytes, nonce_b: bytes) -> tuple[bytes, bytes]:
    """Keys for (initiator->responder, responder->initiator)."""
    ikm = b"".join(sorted((pub_a, pub_b)))
    base = nonce_a + nonce_b
    k_i2r = hmac.new(ikm, base + LABEL_I2R, hashlib.sha256).digest()
    k_r2i = hmac.new(ikm, base + LABEL_R2I, hashlib.sha256).digest()
    return k_i2r, k_r2i


def encode_init(pub: bytes, nonce: bytes) -> bytes:
    return HEADER.pack(0, ZERO_MAC) + bytes([MSG_INIT]) + pub + nonce


def encode_response(pub: bytes, nonce: bytes, tag: bytes) -> bytes:
    return HEADER.pack(0, tag) + bytes([MSG_RESPONSE]) + pub + nonce


def parse_handshake(packet: bytes) -> tuple[int, bytes, bytes, bytes] | None:
    """``(msg_type, pub, nonce, mac)`` for a handshake packet, else None."""
    if len(packet) != HEADER_SIZE + 1 + PUB_SIZE + NONCE_SIZE:
        return None
    seq, tag = HEADER.unpack_from(packet)
    if seq != 0:
        return None
    body = packet[HEADER_SIZE:]
    kind = body[0]
    if kind not in (MSG_INIT, MSG_RESPONSE):
        return None
    return kind, body[1:1 + PUB_SIZE], body[1 + PUB_SIZE:], tag


def is_init(packet: bytes) -> bool:
    hs = parse_handshake(packet)
    return hs is not None and hs[0] == MSG_INIT


class ReplayWindow:
    """64-entry sliding window anchored at the highest verified sequence."""

    __slots__ = ("highest", "bits")

    def __init__(self):
        self.highest = 0
        self.bits = 0

    def check(self, seq: int) -> Rejected | None:
        if seq > self.highest:
            return None
        if seq == 0 or self.highest - seq >= REPLAY_WINDOW:
            return Rejected.WINDOW_TOO_OLD
        if self.bits >> (self.highest - seq) & 1:
            return Rejected.REPLAY
        return None

    def commit(self, seq: int) -> None:
        if seq > self.highest:
            shift = seq - self.highest
            self.bits = ((self.bits << shift) | 1) & ((1 << REPLAY_WINDOW) - 1)
            self.highest = seq
        else:
            self.bits |= 1 << (self.highest - seq)


class ChannelUser:
    """Upcalls from a channel to the Semantic layer."""

    def channel_pending(self, ch: "Channel") -> bool:
        return False

    def channel_pull(self, ch: "Channel") -> bytes | None:
        return None

    def channel_deliver(self, ch: "Channel", frame: bytes) -> None:
        pass

    def channel_condition(self, ch: "Channel", cond: ChannelCondition) -> None:
        pass

    def channel_established(self, ch: "Channel") -> None:
        pass

    def channel_negotiation_failed(self, ch: "Channel", err: Exception) -> None:
        pass


class Channel(FlowUser):
    """One end of an isolation channel, running over one flow section."""

    def __init__(self, local: HostIdentity, section: FlowSection, initiator: bool,
                 rng, expected_remote: bytes | None = None, encrypt: bool = False,
                 user: ChannelUser | None = None, name: str = ""):
        self.local = local
        self.section = section
        self.sim = section.sim
        self.initiator = initiator
        self.expected_remote = expected_remote
        self.encrypt = encrypt
        self.user = user or ChannelUser()
        self.name = name
        self.nonce = bytes(rng.getrandbits(8) for _ in range(NONCE_SIZE))
        self.remote: HostIdentity | None = None
        self.tx_key: bytes | None = None
        self.rx_key: bytes | None = None
        self.send_seq = 1
        self.replay = ReplayWindow()
        self.condition = ChannelCondition.NEGOTIATING
        self.rejected = {r: 0 for r in Rejected}
        self.sealed = 0
        self.opened = 0
        self.failed_upcalls = 0
        self._control: list[bytes] = []
        self._response: bytes | None = None
        self._attempts = 0
        self._hs_timer = Timer(self.sim, self._on_hs_timeout)
        self.negotiated_at: int | None = None
        self.started_at = self.sim.now
        self.deliver_log: list | None = None
        section.user = self

    # -- handshake -----------------------------------------------------
    def start(self) -> None:
        if not self.initiator:
            return
        self._send_init()

    def _send_init(self) -> None:
        self._attempts += 1
        self._control.append(encode_init(self.local.pub, self.nonce))
        self._hs_timer.start(self.section.cc.config.rto_initial * (2 ** (self._attempts - 1)))
        self.sim.trace("iso_init", self.name, f"attempt={self._attempts}")
        self.section.pump()

    def _on_hs_timeout(self) -> None:
        if self.condition is not ChannelCondition.NEGOTIATING:
            return
        if self._attempts >= HANDSHAKE_ATTEMPTS:
            self._fail_negotiation(NegotiationFailed(f"no RESPONSE after {self._attempts} INITs"))
            return
        self._send_init()

    def _fail_negotiation(self, err: Exception) -> None:
        self._hs_timer.kill()
        self.condition = ChannelCondition.FAILED
        self.sim.trace("iso_negfail", self.name, type(err).__name__)
        self.section.close()
        self.user.channel_negotiation_failed(self, err)

    def _on_handshake(self, kind: int, pub: bytes, nonce: bytes, tag: bytes) -> None:
        if kind == MSG_INIT and not self.initiator:
            if self._response is not None:
                if pub == self.remote.pub:
                    self._control.append(self._response)
                    self.section.pump()
                return
            remote = HostIdentity(pub)
            if self.expected_remote is not None and remote.id != self.expected_remote:
                return
            self.remote = remote
            k_i2r, k_r2i = derive_keys(pub, self.local.pub, nonce, self.nonce)
            self.rx_key, self.tx_key = k_i2r, k_r2i
            body = bytes([MSG_RESPONSE]) + self.local.pub + self.nonce
            self._response = encode_response(self.local.pub, self.nonce,
                                             mac(self.tx_key, 0, body))
            self._control.append(self._response)
            self._establish()
            self.section.pump()
        elif kind == MSG_RESPONSE and self.initiator:
            if self.condition is not ChannelCondition.NEGOTIATING:
                return
            remote = HostIdentity(pub)
            if self.expected_remote is not None and remote.id != self.expected_remote:
                self._fail_negotiation(IdentityMismatch("responder identity does not match"))
                return
            k_i2r, k_r2i = derive_keys(self.local.pub, pub, self.nonce, nonce)
            body = bytes([MSG_RESPONSE]) + pub + nonce
            if not hmac.compare_digest(tag, mac(k_r2i, 0, body)):
                self.rejected[Rejected.BAD_MAC] += 1
                return
            self.remote = remote
            self.tx_key, self.rx_key = k_i2r, k_r2i
            self._hs_timer.kill()
            self._establish()

    def _establish(self) -> None:
        self.condition = ChannelCondition.ACTIVE
        self.negotiated_at = self.sim.now
        self.sim.trace("iso_up", self.name, self.remote.short())
        self.user.channel_established(self)

    # -- data path -----------------------------------------------------
    @property
    def established(self) -> bool:
        return self.tx_key is not None

    def seal(self, frame: bytes) -> bytes:
        if self.condition is ChannelCondition.FAILED:
            raise ChannelFailed(f"channel {self.name} has failed")
        if self.tx_key is None:
            raise ChannelFailed(f"channel {self.name} is not negotiated")
        seq = self.send_seq
        self.send_seq = seq + 1
        body = xor_cipher(self.tx_key, seq, frame) if self.encrypt else frame
        self.sealed += 1
        return HEADER.pack(seq, mac(self.tx_key, seq, body)) + body

    def open(self, packet: bytes) -> bytes | Rejected:
        if len(packet) < HEADER_SIZE or self.rx_key is None:
            self.rejected[Rejected.BAD_MAC] += 1
            return Rejected.BAD_MAC
        seq, tag = HEADER.unpack_from(packet)
        body = packet[HEADER_SIZE:]
        if not hmac.compare_digest(tag, mac(self.rx_key, seq, body)):
            self.rejected[Rejected.BAD_MAC] += 1
            return Rejected.BAD_MAC
        bad = self.replay.check(seq)
        if bad is not None:
            self.rejected[bad] += 1
            return bad
        self.replay.commit(seq)
        self.opened += 1
        return xor_cipher(self.rx_key, seq, body) if self.encrypt else body

    # -- FlowUser --------------------------------------------------------
    def flow_pending(self, section) -> bool:
        if self._control:
            return True
        if self.tx_key is None or self.condition is ChannelCondition.FAILED:
            return False
        return self.user.channel_pending(self)

    def flow_pull(self, section) -> bytes | None:
        if self._control:
            return self._control.pop(0)
        if self.tx_key is None or self.condition is ChannelCondition.FAILED:
            return None
        frame = self.user.channel_pull(self)
        if frame is None:
            return None
        return self.seal(frame)

    def flow_deliver(self, section, payload: bytes) -> None:
        if len(payload) >= HEADER_SIZE and payload[:8] == b"\x00" * 8:
            hs = parse_handshake(payload)
            if hs is not None:
                self._on_handshake(*hs)
            return
        if self.condition is ChannelCondition.FAILED:
            return
        frame = self.open(payload)
        if isinstance(frame, Rejected):
            return
        if self.deliver_log is not None:
            self.deliver_log.append(hashlib.sha256(frame).hexdigest())
        self.user.channel_deliver(self, frame)

    def flow_loss(self, section, seq, payload, kind: LossKind) -> None:
        pass

    def flow_condition(self, section, cond: FlowCondition) -> None:
        if self.condition in (ChannelCondition.FAILED, ChannelCondition.NEGOTIATING):
            if cond is FlowCondition.DOWN and self.condition is ChannelCondition.NEGOTIATING:
                self._fail_negotiation(NegotiationFailed("flow section went down"))
            return
        if cond is FlowCondition.DOWN:
            self.fail("flow down")
        elif cond is FlowCondition.UNCERTAIN:
            self._set(ChannelCondition.STALLED)
        else:
            self._set(ChannelCondition.ACTIVE)

    def _set(self, cond: ChannelCondition) -> None:
        if cond is self.condition:
            return
        self.condition = cond
        self.sim.trace("iso_condition", self.name, cond.value)
        self.user.channel_condition(self, cond)

    def fail(self, reason: str = "") -> None:
        if self.condition is ChannelCondition.FAILED:
            return
        self.condition = ChannelCondition.FAILED
        self.failed_upcalls += 1
        self._hs_timer.kill()
        self.sim.trace("iso_failed", self.name, reason)
        self.section.close()
        self.user.channel_condition(self, ChannelCondition.FAILED)

    def pump(self) -> None:
        self.section.pump()
