"""
Network Simulator

Vehicle/infrastructure handshake over simulated links: the bit-exact wire
codec, the per-frame bandwidth ledger, link latency, the communication
policies and NetworkSimulator, which runs one policy on one frame.

Wire layout (little-endian):
    magic "CP3D" | version u8 | kind u8 | frame id u32 | sender id u16 |
    payload length u32 | payload

Payloads:
    QueryBroadcast   M_mu f32 query values, then vehicle pose x y z yaw as f32
    ScoreReply       one f32 raw matching score
    FeatureRequest   empty
    FeaturePayload   C H W as u32, then C*H*W row-major f32

Sender id 0 is the vehicle, i + 1 is infrastructure i.

The ledger counts query values and feature maps only; headers, poses,
replies and requests are tracked separately as gross bytes.
"""

import logging
import struct
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Tuple, Union

import numpy as np

from config.constants import UNITS, WIRE, MessageKind, PolicyName
from models.geometry import Pose, transform_cloud
from models.scene import SceneFrame
from models.tensors import TENSOR_DTYPE, PseudoImage
from services.attention_comm import (
    AttentionState, ScoreSet, fuse_inference, fuse_training, matching_score,
    normalize_scores, refine_feature, select_infrastructure
)
from services.pillars import PillarEncoder
from utils.common import derive_seed
from utils.errors import ProtocolError, ShapeError, ValidationError
from utils.logging import LoggerAdapter, get_log_context, get_logger

logger = get_logger(__name__)

HEADER = struct.Struct(WIRE['HEADER_FORMAT'])
_FEATURE_DIMS = struct.Struct('<III')
_LENGTH_PREFIX = struct.Struct('<I')
_REAL = np.dtype('<f4')
_POSE_BYTES = WIRE['POSE_REALS'] * WIRE['REAL_SIZE']

VEHICLE = WIRE['VEHICLE_SENDER_ID']


def infra_sender_id(infra_id: int) -> int:
    return infra_id + 1


# ============= Message Bodies =============

@dataclass(frozen=True)
class QueryBroadcast:
    """Vehicle query and pose, sent to every infrastructure."""
    query: Tuple[float, ...]
    pose: Tuple[float, float, float, float]

    def to_payload(self) -> bytes:
        values = np.concatenate([np.asarray(self.query), np.asarray(self.pose)])
        return values.astype(_REAL).tobytes()

    @classmethod
    def from_payload(cls, payload: bytes) -> 'QueryBroadcast':
        values = np.frombuffer(payload, dtype=_REAL).astype(np.float64)
        return cls(tuple(values[:-WIRE['POSE_REALS']]), tuple(values[-WIRE['POSE_REALS']:]))

    @property
    def query_vector(self) -> np.ndarray:
        return np.asarray(self.query, dtype=np.float64)


@dataclass(frozen=True)
class ScoreReply:
    """Raw matching score of one infrastructure."""
    score: float

    def to_payload(self) -> bytes:
        return np.array([self.score], dtype=_REAL).tobytes()

    @classmethod
    def from_payload(cls, payload: bytes) -> 'ScoreReply':
        return cls(float(np.frombuffer(payload, dtype=_REAL)[0]))


@dataclass(frozen=True)
class FeatureRequest:
    def to_payload(self) -> bytes:
        return b''

    @classmethod
    def from_payload(cls, payload: bytes) -> 'FeatureRequest':
        return cls()


@dataclass(frozen=True)
class FeaturePayload:
    """One pseudo-image in the vehicle frame."""
    image: PseudoImage

    def to_payload(self) -> bytes:
        return _FEATURE_DIMS.pack(*self.image.shape) + self.image.to_bytes()

    @classmethod
    def from_payload(cls, payload: bytes) -> 'FeaturePayload':
        channels, height, width = _FEATURE_DIMS.unpack_from(payload)
        return cls(PseudoImage.from_bytes(payload[_FEATURE_DIMS.size:], channels, height, width))


BODY_TYPES = {
    MessageKind.QUERY_BROADCAST: QueryBroadcast,
    MessageKind.SCORE_REPLY: ScoreReply,
    MessageKind.FEATURE_REQUEST: FeatureRequest,
    MessageKind.FEATURE_PAYLOAD: FeaturePayload,
}

MessageBody = Union[QueryBroadcast, ScoreReply, FeatureRequest, FeaturePayload]


# ============= Protocol Message =============

@dataclass(frozen=True)
class ProtocolMessage:
    kind: MessageKind
    frame_id: int
    sender_id: int
    payload: bytes = b''
    version: int = WIRE['VERSION']
    magic: bytes = WIRE['MAGIC']

    @classmethod
    def build(cls, body: MessageBody, frame_id: int, sender_id: int) -> 'ProtocolMessage':
        kinds = {body_type: kind for kind, body_type in BODY_TYPES.items()}
        return cls(kinds[type(body)], frame_id, sender_id, body.to_payload())

    @property
    def size(self) -> int:
        """Gross bytes on the wire."""
        return HEADER.size + len(self.payload)

    @property
    def counted_bytes(self) -> int:
        """Bytes charged to the bandwidth ledger."""
        if self.kind is MessageKind.QUERY_BROADCAST:
            return len(self.payload) - _POSE_BYTES
        if self.kind is MessageKind.FEATURE_PAYLOAD:
            return len(self.payload) - _FEATURE_DIMS.size
        return 0

    def body(self) -> MessageBody:
        """
        Parse the payload into its typed body.

        Raises:
            ProtocolError: If the payload does not fit the kind
        """
        _check_payload(self.kind, self.payload)
        try:
            return BODY_TYPES[self.kind].from_payload(self.payload)
        except (ShapeError, ValueError, struct.error) as e:
            raise ProtocolError(f"bad {self.kind.name} payload: {e}", offset=HEADER.size) from e


def _check_payload(kind: MessageKind, payload: bytes) -> None:
    length = len(payload)
    real = WIRE['REAL_SIZE']
    if kind is MessageKind.QUERY_BROADCAST:
        if length < _POSE_BYTES + real or length % real:
            raise ProtocolError(f"QueryBroadcast payload of {length} bytes is not query + pose reals",
                                offset=HEADER.size)
    elif kind is MessageKind.SCORE_REPLY:
        if length != real:
            raise ProtocolError(f"ScoreReply payload must be {real} bytes, got {length}", offset=HEADER.size)
    elif kind is MessageKind.FEATURE_REQUEST:
        if length:
            raise ProtocolError(f"FeatureRequest payload must be empty, got {length} bytes",
                                offset=HEADER.size)
    elif kind is MessageKind.FEATURE_PAYLOAD:
        if length < _FEATURE_DIMS.size:
            raise ProtocolError("FeaturePayload truncated inside C H W", offset=HEADER.size + length)
        channels, height, width = _FEATURE_DIMS.unpack_from(payload)
        expected = _FEATURE_DIMS.size + channels * height * width * TENSOR_DTYPE.itemsize
        if length != expected:
            raise ProtocolError(
                f"FeaturePayload of {length} bytes does not match ({channels}, {height}, {width})",
                offset=HEADER.size + _FEATURE_DIMS.size,
            )


def encode_message(message: ProtocolMessage) -> bytes:
    """
    Serialize a message.

    Raises:
        ProtocolError: If a header field does not fit its width
    """
    try:
        header = HEADER.pack(message.magic, message.version, int(message.kind),
                             message.frame_id, message.sender_id, len(message.payload))
    except struct.error as e:
        raise ProtocolError(f"cannot encode header: {e}") from e
    return header + message.payload


def decode_message(data: bytes) -> ProtocolMessage:
    """
    Parse one complete message.

    Raises:
        ProtocolError: Bad magic, unsupported version, unknown kind, a
            length mismatch or a payload that does not fit its kind; the
            error carries the byte offset of the fault
    """
    data = bytes(data)
    if len(data) < HEADER.size:
        raise ProtocolError(f"truncated header: {len(data)} of {HEADER.size} bytes", offset=len(data))

    magic, version, kind, frame_id, sender_id, length = HEADER.unpack_from(data)
    if magic != WIRE['MAGIC']:
        raise ProtocolError(f"bad magic {magic!r}", offset=0)
    if version != WIRE['VERSION']:
        raise ProtocolError(f"unsupported version {version}", offset=4)
    try:
        kind = MessageKind(kind)
    except ValueError:
        raise ProtocolError(f"unknown message kind {kind}", offset=5) from None

    end = HEADER.size + length
    if len(data) < end:
        raise ProtocolError(f"truncated payload: header says {length} bytes", offset=len(data))
    if len(data) > end:
        raise ProtocolError(f"{len(data) - end} trailing bytes after payload", offset=end)

    message = ProtocolMessage(kind, frame_id, sender_id, data[HEADER.size:])
    message.body()
    return message


# ============= Message Trace =============

def trace_to_bytes(messages: Iterable[Union[bytes, ProtocolMessage]]) -> bytes:
    chunks = []
    for message in messages:
        data = encode_message(message) if isinstance(message, ProtocolMessage) else bytes(message)
        chunks.append(_LENGTH_PREFIX.pack(len(data)) + data)
    return b''.join(chunks)


def trace_from_bytes(data: bytes) -> List[ProtocolMessage]:
    """Parse a length-prefixed message log."""
    messages, offset = [], 0
    while offset < len(data):
        if offset + _LENGTH_PREFIX.size > len(data):
            raise ProtocolError("truncated length prefix", offset=offset)
        (length,) = _LENGTH_PREFIX.unpack_from(data, offset)
        start = offset + _LENGTH_PREFIX.size
        if start + length > len(data):
            raise ProtocolError(f"trace entry of {length} bytes runs past the end", offset=start)
        try:
            messages.append(decode_message(data[start:start + length]))
        except ProtocolError as e:
            raise ProtocolError(f"trace entry {len(messages)}: {e}", offset=start) from e
        offset = start + length
    return messages


def write_trace(path: Union[str, Path], messages: Iterable[Union[bytes, ProtocolMessage]]) -> None:
    Path(path).write_bytes(trace_to_bytes(messages))


def read_trace(path: Union[str, Path]) -> List[ProtocolMessage]:
    return trace_from_bytes(Path(path).read_bytes())


# ============= Links =============

@dataclass(frozen=True)
class LinkModel:
    """One vehicle-infrastructure link: bytes per second, seconds, loss probability."""
    capacity: float
    latency: float = 0.0
    loss_probability: float = 0.0

    def __post_init__(self):
        if not self.capacity > 0:
            raise ValidationError(f"link capacity must be > 0, got {self.capacity}")
        if not self.latency >= 0:
            raise ValidationError(f"link latency must be >= 0, got {self.latency}")
        if not 0.0 <= self.loss_probability <= 1.0:
            raise ValidationError(f"link loss probability must be in [0, 1], got {self.loss_probability}")

    def transfer_time(self, nbytes: int) -> float:
        return self.latency + nbytes / self.capacity


Links = Union[LinkModel, Mapping[int, LinkModel]]


def _link(links: Links, infra_id: int) -> LinkModel:
    if isinstance(links, LinkModel):
        return links
    if infra_id not in links:
        raise ValidationError(f"no link model for infrastructure {infra_id}")
    return links[infra_id]


# ============= Bandwidth Ledger =============

@dataclass(frozen=True)
class LedgerEntry:
    """One transmitted message; infra_id None for a broadcast."""
    kind: MessageKind
    infra_id: Optional[int]
    counted_bytes: int
    gross_bytes: int


@dataclass
class BandwidthLedger:
    """Bytes sent within one frame."""
    entries: List[LedgerEntry] = field(default_factory=list)

    def record(self, message: ProtocolMessage, infra_id: Optional[int]) -> None:
        self.entries.append(LedgerEntry(message.kind, infra_id, message.counted_bytes, message.size))

    @property
    def total_bytes(self) -> int:
        return sum(entry.counted_bytes for entry in self.entries)

    @property
    def gross_bytes(self) -> int:
        return sum(entry.gross_bytes for entry in self.entries)

    @property
    def total_kb(self) -> float:
        return self.total_bytes / UNITS['KB']

    @property
    def total_mb(self) -> float:
        return self.total_bytes / UNITS['MB']

    def bytes_by_kind(self) -> Dict[MessageKind, int]:
        totals = {kind: 0 for kind in MessageKind}
        for entry in self.entries:
            totals[entry.kind] += entry.counted_bytes
        return totals

    def rows(self, frame_id: int, policy: str) -> List[dict]:
        """One report row per message kind with counted bytes."""
        return [
            {'frame': frame_id, 'policy': policy, 'kind': kind.name,
             'bytes': count, 'kb': count / UNITS['KB']}
            for kind, count in self.bytes_by_kind().items()
        ]


def latency_trace(ledger: BandwidthLedger, links: Links) -> List[Tuple[str, float]]:
    """
    Duration of every phase that carried messages, in handshake order.

    A phase lasts as long as its slowest transfer; a broadcast is as slow
    as the slowest link it goes out on.
    """
    trace = []
    for kind in MessageKind:
        entries = [entry for entry in ledger.entries if entry.kind is kind]
        if not entries:
            continue
        times = []
        for entry in entries:
            if entry.infra_id is None:
                candidates = [links] if isinstance(links, LinkModel) else list(links.values())
                times.extend(link.transfer_time(entry.counted_bytes) for link in candidates)
            else:
                times.append(_link(links, entry.infra_id).transfer_time(entry.counted_bytes))
        trace.append((kind.name, max(times)))
    return trace


def frame_latency(ledger: BandwidthLedger, links: Links) -> float:
    """Sum of sequential phase durations; 0 for a frame without messages."""
    return sum(duration for _, duration in latency_trace(ledger, links))


# ============= Frame Exchange =============

@dataclass
class FrameImages:
    """Vehicle pseudo-image and one per infrastructure, all in the vehicle frame."""
    vehicle: PseudoImage
    infrastructures: List[PseudoImage]

    @property
    def num_infrastructures(self) -> int:
        return len(self.infrastructures)


@dataclass
class FrameResult:
    """
    Outcome of one policy on one frame.

    Attributes:
        fused: 2C-channel RPN input
        selected: Infrastructure whose features were fused (single-pick policies)
        participants: Sensor indices whose features made it into `fused`
        ledger: Bytes sent
        latency_trace: (phase, seconds) in handshake order
        latency: Total frame latency
        messages: Encoded messages in send order
        scores: Learn2com scores as received
    """
    frame_id: int
    policy: str
    fused: PseudoImage
    selected: Optional[int]
    participants: List[int]
    ledger: BandwidthLedger
    latency_trace: List[Tuple[str, float]]
    latency: float
    messages: List[bytes]
    scores: Optional[ScoreSet] = None


class FrameSession:
    """
    Message delivery for one frame and one policy.

    Every message is encoded, charged to the ledger, logged, subjected to
    the link's loss draw and decoded at the receiver.
    """

    def __init__(self, frame_id: int, images: FrameImages, vehicle_pose: Pose,
                 links: Links, loss_seed: int, log: logging.LoggerAdapter):
        self.frame_id = frame_id
        self.images = images
        self.vehicle_pose = vehicle_pose
        self.links = links
        self.loss_seed = loss_seed
        self.log = log
        self.ledger = BandwidthLedger()
        self.messages: List[bytes] = []

    @property
    def num_infrastructures(self) -> int:
        return self.images.num_infrastructures

    def _lost(self, kind: MessageKind, sender_id: int, infra_id: int) -> bool:
        probability = _link(self.links, infra_id).loss_probability
        if probability <= 0.0:
            return False
        draw = np.random.default_rng(
            derive_seed(self.loss_seed, self.frame_id, int(kind), sender_id, infra_id)
        ).random()
        return bool(draw < probability)

    def _transmit(self, body: MessageBody, sender_id: int, infra_id: Optional[int]) -> bytes:
        message = ProtocolMessage.build(body, self.frame_id, sender_id)
        data = encode_message(message)
        self.ledger.record(message, infra_id)
        self.messages.append(data)
        return data

    def send(self, body: MessageBody, sender_id: int, infra_id: int) -> Optional[MessageBody]:
        """Point-to-point delivery; None when the link drops the message."""
        data = self._transmit(body, sender_id, infra_id)
        if self._lost(MessageKind(data[5]), sender_id, infra_id):
            self.log.debug(f"{type(body).__name__} on link {infra_id} lost")
            return None
        return decode_message(data).body()

    def broadcast(self, body: MessageBody) -> Dict[int, MessageBody]:
        """Vehicle broadcast, charged once; returns what each infrastructure received."""
        data = self._transmit(body, VEHICLE, None)
        received = {}
        for infra_id in range(self.num_infrastructures):
            if self._lost(MessageKind(data[5]), VEHICLE, infra_id):
                self.log.debug(f"{type(body).__name__} to infrastructure {infra_id} lost")
                continue
            received[infra_id] = decode_message(data).body()
        return received

    def request_features(self, infra_id: int) -> Optional[PseudoImage]:
        """FeatureRequest to one infrastructure and its FeaturePayload back."""
        if self.send(FeatureRequest(), VEHICLE, infra_id) is None:
            return None
        return self.push_features(infra_id)

    def push_features(self, infra_id: int) -> Optional[PseudoImage]:
        reply = self.send(FeaturePayload(self.images.infrastructures[infra_id]),
                          infra_sender_id(infra_id), infra_id)
        return None if reply is None else reply.image


def local_only(images: FrameImages) -> PseudoImage:
    """Vehicle features with a zero second half, for the 2C-channel RPN."""
    local = images.vehicle
    return fuse_inference(local, PseudoImage.zeros(*local.shape))


# ============= Policies =============

@dataclass
class PolicyOutcome:
    fused: PseudoImage
    selected: Optional[int] = None
    participants: List[int] = field(default_factory=lambda: [0])
    scores: Optional[ScoreSet] = None


class Policy(ABC):
    """Decides which infrastructures send features and how they are fused."""

    name: str = ''

    def run(self, session: FrameSession) -> PolicyOutcome:
        if session.num_infrastructures == 0 and self.needs_infrastructure:
            session.log.warning(f"{self.name} has no infrastructure to talk to; using local features")
            return PolicyOutcome(local_only(session.images))
        return self.exchange(session)

    @property
    def needs_infrastructure(self) -> bool:
        return True

    @abstractmethod
    def exchange(self, session: FrameSession) -> PolicyOutcome:
        pass

    def __repr__(self) -> str:
        return self.name


class LocVehicle(Policy):
    """No communication."""

    name = PolicyName.LOC_VEHICLE.value

    @property
    def needs_infrastructure(self) -> bool:
        return False

    def exchange(self, session: FrameSession) -> PolicyOutcome:
        return PolicyOutcome(local_only(session.images))


class _SinglePick(Policy):
    """Request one infrastructure's features and fuse them with weight 1."""

    @abstractmethod
    def choose(self, session: FrameSession) -> int:
        pass

    def exchange(self, session: FrameSession) -> PolicyOutcome:
        pick = self.choose(session)
        image = session.request_features(pick)
        if image is None:
            session.log.warning(f"features of infrastructure {pick} lost; using local features")
            return PolicyOutcome(local_only(session.images))
        fused = fuse_inference(session.images.vehicle, refine_feature(image, 1.0))
        return PolicyOutcome(fused, pick, [0, pick + 1])


class RandSelect(_SinglePick):
    """Uniform pick per frame, reproducible from (seed, frame id)."""

    name = PolicyName.RAND_SELECT.value

    def __init__(self, seed: int = 0):
        self.seed = seed

    def choose(self, session: FrameSession) -> int:
        rng = np.random.default_rng(derive_seed(self.seed, session.frame_id))
        return int(rng.integers(session.num_infrastructures))


class FixedSelect(_SinglePick):
    """Always the same infrastructure."""

    def __init__(self, infra_id: int):
        self.infra_id = infra_id
        self.name = f"FixedSelect{infra_id}"

    def choose(self, session: FrameSession) -> int:
        if not 0 <= self.infra_id < session.num_infrastructures:
            raise ValidationError(
                f"infrastructure {self.infra_id} not in frame with {session.num_infrastructures}"
            )
        return self.infra_id


class CombAll(Policy):
    """Every infrastructure pushes features; equal-weight combination."""

    name = PolicyName.COMB_ALL.value

    def exchange(self, session: FrameSession) -> PolicyOutcome:
        received: Dict[int, PseudoImage] = {}
        for infra_id in range(session.num_infrastructures):
            image = session.push_features(infra_id)
            if image is not None:
                received[infra_id] = image
        if not received:
            session.log.warning("all feature payloads lost; using local features")
            return PolicyOutcome(local_only(session.images))

        ids = sorted(received)
        equal = normalize_scores(np.zeros(len(ids)), ids)
        fused = fuse_training(session.images.vehicle, [received[i] for i in ids], equal)
        return PolicyOutcome(fused, None, [0] + [i + 1 for i in ids], equal)


class Learn2com(Policy):
    """
    Three-step handshake: query broadcast, score replies, request to the
    best-scoring infrastructure; its features are scaled by their softmax
    weight and concatenated to the vehicle's.
    """

    name = PolicyName.LEARN2COM.value

    def __init__(self, state: AttentionState):
        self.state = state

    def exchange(self, session: FrameSession) -> PolicyOutcome:
        query = self.state.encode_query(session.images.vehicle)
        broadcast = QueryBroadcast(tuple(query.values), tuple(session.vehicle_pose.as_array()))
        received = session.broadcast(broadcast)

        raw: Dict[int, float] = {}
        for infra_id, message in sorted(received.items()):
            key = self.state.encode_key(session.images.infrastructures[infra_id])
            score = matching_score(message.query_vector, key, self.state.attention)
            reply = session.send(ScoreReply(score), infra_sender_id(infra_id), infra_id)
            if reply is not None:
                raw[infra_id] = reply.score
        if not raw:
            session.log.warning("no score replies arrived; using local features")
            return PolicyOutcome(local_only(session.images))

        ids = sorted(raw)
        scores = normalize_scores([raw[i] for i in ids], ids)
        best = select_infrastructure(scores)
        session.log.debug(f"Selected infrastructure {best} with weight {scores.weight_of(best):.4f}")

        image = session.request_features(best)
        if image is None:
            session.log.warning(f"features of infrastructure {best} lost; using local features")
            return PolicyOutcome(local_only(session.images), scores=scores)
        fused = fuse_inference(session.images.vehicle, refine_feature(image, scores.weight_of(best)))
        return PolicyOutcome(fused, best, [0, best + 1], scores)


def policy_from_name(
    name: Union[str, PolicyName],
    attention_state: Optional[AttentionState] = None,
    seed: int = 0
) -> Policy:
    """
    Build a policy from its name.

    Raises:
        ValidationError: Unknown name, or Learn2com without attention state
    """
    valid = {policy.value: policy for policy in PolicyName}
    key = name.value if isinstance(name, PolicyName) else name
    if key not in valid:
        raise ValidationError(f"unknown policy {key!r}; valid names: {', '.join(valid)}")

    policy = valid[key]
    if policy is PolicyName.LOC_VEHICLE:
        return LocVehicle()
    if policy is PolicyName.RAND_SELECT:
        return RandSelect(seed)
    if policy is PolicyName.COMB_ALL:
        return CombAll()
    if attention_state is None:
        raise ValidationError("Learn2com needs a trained attention state")
    return Learn2com(attention_state)


# ============= Simulator =============

class NetworkSimulator:
    """
    Runs policies on frames over a fixed set of links.

    Pseudo-images depend only on the frame, so encode_frame computes them
    once and run_frame accepts them for every policy.
    """

    def __init__(self, encoder: PillarEncoder, links: Links, loss_seed: int = 0,
                 logger: Optional[logging.Logger] = None):
        self.encoder = encoder
        self.links = links
        self.loss_seed = loss_seed
        self.logger = logger or get_logger(__name__)

    def encode_frame(self, frame: SceneFrame) -> FrameImages:
        vehicle = self.encoder.encode(frame.clouds[0])
        infrastructures = [
            self.encoder.encode(transform_cloud(cloud, pose, frame.vehicle_pose))
            for cloud, pose in zip(frame.clouds[1:], frame.infra_poses)
        ]
        return FrameImages(vehicle, infrastructures)

    def run_frame(self, frame: SceneFrame, policy: Policy, images: Optional[FrameImages] = None) -> FrameResult:
        images = images or self.encode_frame(frame)
        if images.num_infrastructures != frame.num_infrastructures:
            raise ShapeError(
                f"{images.num_infrastructures} infrastructure images for "
                f"{frame.num_infrastructures} infrastructures"
            )
        log = LoggerAdapter(self.logger, get_log_context(frame_id=frame.frame_id, policy=policy.name))
        session = FrameSession(frame.frame_id, images, frame.vehicle_pose, self.links, self.loss_seed, log)
        outcome = policy.run(session)

        trace = latency_trace(session.ledger, self.links)
        latency = sum(duration for _, duration in trace)
        log.debug(f"Ledger {session.ledger.total_bytes} counted / {session.ledger.gross_bytes} gross bytes, "
                  f"latency {latency:.6f}s")
        return FrameResult(
            frame_id=frame.frame_id,
            policy=policy.name,
            fused=outcome.fused,
            selected=outcome.selected,
            participants=outcome.participants,
            ledger=session.ledger,
            latency_trace=trace,
            latency=latency,
            messages=session.messages,
            scores=outcome.scores,
        )


def run_frame(
    frame: SceneFrame,
    policy: Policy,
    links: Links,
    encoder: Optional[PillarEncoder] = None,
    images: Optional[FrameImages] = None
) -> FrameResult:
    """One policy on one frame with a throwaway simulator."""
    return NetworkSimulator(encoder or PillarEncoder(), links).run_frame(frame, policy, images)
