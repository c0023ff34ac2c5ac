"""
Attention-Based Communication

Query/key encoding of pseudo-images, the general-attention matching score,
softmax normalization, attention-refined feature maps, infrastructure
selection, fusion, and gradient-descent learning of the attention matrix
against oracle-best-infrastructure labels.

Query and key networks are a spatial mean pool followed by one linear
projection each; W_a is the only learned coupling between them.
"""

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from config.constants import ATTENTION_DEFAULTS, GRID_DEFAULTS
from models.tensors import PseudoImage, read_tensor, write_tensor
from utils.common import derive_seed, uniform_stream
from utils.decorators import validate_input
from utils.errors import ShapeError, ValidationError
from utils.logging import get_logger
from utils.validators import validate_count, validate_positive

logger = get_logger(__name__)

AttentionMatrix = np.ndarray


# ============= Vector Types =============

def _finite_vector(values, name: str) -> np.ndarray:
    vector = np.asarray(values, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(vector)):
        raise ValidationError(f"{name} entries must be finite")
    return vector


@dataclass
class QueryVector:
    """Compact vehicle query mu (M_mu entries)."""
    values: np.ndarray

    def __post_init__(self):
        self.values = _finite_vector(self.values, 'query')

    def __len__(self) -> int:
        return len(self.values)


@dataclass
class KeyVector:
    """Infrastructure key psi (M_psi entries)."""
    values: np.ndarray

    def __post_init__(self):
        self.values = _finite_vector(self.values, 'key')

    def __len__(self) -> int:
        return len(self.values)


def _values(vector) -> np.ndarray:
    if isinstance(vector, (QueryVector, KeyVector)):
        return vector.values
    return np.asarray(vector, dtype=np.float64).reshape(-1)


@dataclass
class ScoreSet:
    """
    Raw matching scores, their softmax and the infrastructure ids.

    Scores from matching_score lie in [-1, 1]; normalize_scores itself
    accepts any finite values.
    """
    raw: np.ndarray
    normalized: np.ndarray
    ids: List[int]

    def __post_init__(self):
        self.raw = np.asarray(self.raw, dtype=np.float64)
        self.normalized = np.asarray(self.normalized, dtype=np.float64)
        if len(self.raw) != len(self.ids) or len(self.normalized) != len(self.ids):
            raise ShapeError(f"{len(self.raw)} scores for {len(self.ids)} infrastructure ids")

    def __len__(self) -> int:
        return len(self.ids)

    def weight_of(self, infra_id: int) -> float:
        return float(self.normalized[self.ids.index(infra_id)])


# ============= Encoding =============

def _encode(image: PseudoImage, projection: np.ndarray, name: str) -> np.ndarray:
    projection = np.asarray(projection, dtype=np.float64)
    if projection.ndim != 2 or projection.shape[1] != image.channels:
        raise ShapeError(
            f"{name} projection {projection.shape} does not match {image.channels} image channels"
        )
    pooled = image.data.astype(np.float64).mean(axis=(1, 2))
    return projection @ pooled


def encode_query(image: PseudoImage, projection: np.ndarray) -> QueryVector:
    """Mean-pool the image to a C-vector and project it to M_mu entries."""
    return QueryVector(_encode(image, projection, 'query'))


def encode_key(image: PseudoImage, projection: np.ndarray) -> KeyVector:
    """Mean-pool the image to a C-vector and project it to M_psi entries."""
    return KeyVector(_encode(image, projection, 'key'))


# ============= Scoring =============

def _check_dims(query: np.ndarray, key: np.ndarray, w: np.ndarray) -> None:
    if w.shape != (len(query), len(key)):
        raise ShapeError(
            f"attention matrix {w.shape} does not match query {len(query)} and key {len(key)}"
        )


def matching_score(query, key, w: AttentionMatrix, return_flag: bool = False):
    """
    General-attention matching score t = mu^T W psi / (||mu^T W|| ||psi||).

    A zero-norm projected query or key yields 0 and a warning instead of NaN.

    Args:
        query: QueryVector or array
        key: KeyVector or array
        w: Attention matrix M_mu x M_psi
        return_flag: Also return whether the input was degenerate

    Returns:
        Score in [-1, 1], or (score, degenerate) when return_flag is set
    """
    mu, psi = _values(query), _values(key)
    w = np.asarray(w, dtype=np.float64)
    _check_dims(mu, psi, w)

    projected = mu @ w
    norm = float(np.linalg.norm(projected)) * float(np.linalg.norm(psi))
    if norm == 0.0:
        logger.warning("Degenerate matching input (zero-norm query projection or key); score set to 0")
        return (0.0, True) if return_flag else 0.0

    score = float(np.clip(projected @ psi / norm, -1.0, 1.0))
    return (score, False) if return_flag else score


def normalize_scores(raw: Sequence[float], ids: Optional[Sequence[int]] = None) -> ScoreSet:
    """
    Softmax over infrastructures with max subtraction.

    Args:
        raw: Raw scores t_iv
        ids: Infrastructure ids (defaults to 0..N-1)

    Returns:
        ScoreSet
    """
    raw = np.asarray(raw, dtype=np.float64).reshape(-1)
    if len(raw) == 0:
        raise ValidationError("normalize_scores needs at least one score")
    if not np.all(np.isfinite(raw)):
        raise ValidationError("scores must be finite")

    shifted = np.exp(raw - raw.max())
    normalized = shifted / shifted.sum()
    ids = list(range(len(raw))) if ids is None else [int(i) for i in ids]
    return ScoreSet(raw=raw, normalized=normalized, ids=ids)


def select_infrastructure(scores: Union[ScoreSet, Sequence[float]]) -> int:
    """
    Argmax over raw scores; the lowest id wins ties.

    A plain sequence is treated as raw scores indexed by position.
    """
    if isinstance(scores, ScoreSet):
        values, ids = scores.raw, scores.ids
    else:
        values = np.asarray(scores, dtype=np.float64).reshape(-1)
        ids = list(range(len(values)))
    if len(values) == 0:
        raise ValidationError("select_infrastructure needs at least one score")

    best = float(np.max(values))
    return min(i for i, v in zip(ids, values) if v == best)


# ============= Feature Refinement and Fusion =============

def refine_feature(image: PseudoImage, weight: float) -> PseudoImage:
    """Scale every entry of an infrastructure image by its attention weight."""
    if not math.isfinite(weight):
        raise ValidationError(f"refinement weight must be finite, got {weight}")
    return PseudoImage(image.data * np.float32(weight))


def fuse_inference(local: PseudoImage, selected_refined: PseudoImage) -> PseudoImage:
    """Channel concatenation [F_v, F_sigma,q]."""
    if local.shape[1:] != selected_refined.shape[1:]:
        raise ShapeError(
            f"cannot fuse {local.shape} with {selected_refined.shape}: spatial sizes differ"
        )
    return PseudoImage(np.concatenate([local.data, selected_refined.data], axis=0))


def fuse_training(
    local: PseudoImage,
    infra_images: Sequence[PseudoImage],
    scores: ScoreSet
) -> PseudoImage:
    """[F_v, sum_i sigma_i F_i]: the second half is a convex combination."""
    if len(infra_images) != len(scores):
        raise ShapeError(f"{len(infra_images)} infrastructure images for {len(scores)} scores")
    if not infra_images:
        raise ShapeError("fuse_training needs at least one infrastructure image")
    for image in infra_images:
        if image.shape != local.shape:
            raise ShapeError(f"infrastructure image {image.shape} does not match local {local.shape}")

    combined = np.zeros(local.shape, dtype=np.float64)
    for weight, image in zip(scores.normalized, infra_images):
        combined += weight * image.data
    return PseudoImage(np.concatenate([local.data, combined.astype(np.float32)], axis=0))


# ============= Gradient and Training =============

def score_gradient(query, key, w: AttentionMatrix) -> np.ndarray:
    """
    Gradient of the matching score with respect to W_a.

    With u = mu^T W and t the score, returns
    mu (x) (psi / (||u|| ||psi||) - t u / ||u||^2).

    Raises:
        ValidationError: If ||u|| or ||psi|| is zero
    """
    mu, psi = _values(query), _values(key)
    w = np.asarray(w, dtype=np.float64)
    _check_dims(mu, psi, w)

    projected = mu @ w
    u_norm = float(np.linalg.norm(projected))
    psi_norm = float(np.linalg.norm(psi))
    if u_norm == 0.0 or psi_norm == 0.0:
        raise ValidationError("score gradient undefined for zero-norm query projection or key")

    score = float(projected @ psi) / (u_norm * psi_norm)
    direction = psi / (u_norm * psi_norm) - score * projected / (u_norm * u_norm)
    return np.outer(mu, direction)


@dataclass
class TrainingExample:
    """One frame's vehicle query, the N infrastructure keys and the label."""
    query: np.ndarray
    keys: np.ndarray
    oracle_best: int

    def __post_init__(self):
        self.query = _values(self.query)
        self.keys = np.atleast_2d(np.asarray(self.keys, dtype=np.float64))
        if not 0 <= self.oracle_best < len(self.keys):
            raise ValidationError(
                f"oracle_best {self.oracle_best} outside 0..{len(self.keys) - 1}"
            )


def _as_examples(dataset) -> List[TrainingExample]:
    examples = []
    for item in dataset:
        if isinstance(item, TrainingExample):
            examples.append(item)
        else:
            query, keys, label = item
            examples.append(TrainingExample(_values(query), [_values(k) for k in keys], int(label)))
    return examples


def _example_scores(example: TrainingExample, w: np.ndarray) -> np.ndarray:
    projected = example.query @ w
    u_norm = np.linalg.norm(projected)
    key_norms = np.linalg.norm(example.keys, axis=1)
    scores = np.zeros(len(example.keys))
    valid = key_norms > 0
    if u_norm > 0:
        scores[valid] = (example.keys[valid] @ projected) / (u_norm * key_norms[valid])
    return np.clip(scores, -1.0, 1.0)


def cross_entropy(w: AttentionMatrix, dataset) -> float:
    """Mean cross-entropy between softmax(scores) and one-hot labels."""
    examples = _as_examples(dataset)
    if not examples:
        return 0.0
    total = 0.0
    for example in examples:
        scores = _example_scores(example, w)
        shifted = scores - scores.max()
        total += -(shifted[example.oracle_best] - math.log(np.exp(shifted).sum()))
    return total / len(examples)


def cross_entropy_gradient(w: AttentionMatrix, dataset) -> np.ndarray:
    """Mean over examples of sum_i (sigma_i - y_i) dt_i/dW."""
    examples = _as_examples(dataset)
    gradient = np.zeros_like(np.asarray(w, dtype=np.float64))
    if not examples:
        return gradient

    for example in examples:
        projected = example.query @ w
        if np.linalg.norm(projected) == 0.0:
            continue
        weights = normalize_scores(_example_scores(example, w)).normalized
        weights[example.oracle_best] -= 1.0
        for coefficient, key in zip(weights, example.keys):
            if np.linalg.norm(key) > 0.0:
                gradient += coefficient * score_gradient(example.query, key, w)
    return gradient / len(examples)


def selection_accuracy(w: AttentionMatrix, dataset) -> float:
    """Fraction of examples whose argmax score picks the oracle-best label."""
    examples = _as_examples(dataset)
    if not examples:
        return 0.0
    hits = sum(
        select_infrastructure(_example_scores(example, w)) == example.oracle_best
        for example in examples
    )
    return hits / len(examples)


@dataclass
class TrainingResult:
    """Final attention matrix with per-epoch loss and accuracy."""
    weights: np.ndarray
    losses: List[float] = field(default_factory=list)
    accuracies: List[float] = field(default_factory=list)


class AttentionTrainer:
    """
    Full-batch gradient descent on the selection cross-entropy.

    A step that would raise the loss is retried with half the step size, up
    to max_halvings times; if none helps the weights stay put. The recorded
    loss is therefore non-increasing.
    """

    def __init__(
        self,
        learning_rate: float = ATTENTION_DEFAULTS['LEARNING_RATE'],
        epochs: int = ATTENTION_DEFAULTS['EPOCHS'],
        max_halvings: int = ATTENTION_DEFAULTS['MAX_STEP_HALVINGS']
    ):
        if not learning_rate > 0:
            raise ValidationError(f"learning rate must be > 0, got {learning_rate}")
        if epochs < 0:
            raise ValidationError(f"epochs must be >= 0, got {epochs}")
        self.learning_rate = float(learning_rate)
        self.epochs = int(epochs)
        self.max_halvings = int(max_halvings)

    def fit(self, dataset, w0: AttentionMatrix) -> TrainingResult:
        examples = _as_examples(dataset)
        w = np.array(w0, dtype=np.float64, copy=True)
        result = TrainingResult(weights=w)
        if not examples:
            logger.warning("Attention training called with an empty dataset")
            return result

        loss = cross_entropy(w, examples)
        for epoch in range(self.epochs):
            gradient = cross_entropy_gradient(w, examples)
            step = self.learning_rate
            for _ in range(self.max_halvings + 1):
                candidate = w - step * gradient
                candidate_loss = cross_entropy(candidate, examples)
                if candidate_loss <= loss:
                    w, loss = candidate, candidate_loss
                    break
                step *= 0.5

            result.losses.append(loss)
            result.accuracies.append(selection_accuracy(w, examples))
            logger.debug(f"Epoch {epoch + 1}/{self.epochs}: loss={loss:.6f} step={step:.3g}")

        result.weights = w
        return result


@validate_input(lr=validate_positive, epochs=validate_count)
def train_attention(dataset, w0: AttentionMatrix, lr: float, epochs: int) -> AttentionMatrix:
    """Gradient descent on the selection cross-entropy; returns the final W_a."""
    return AttentionTrainer(learning_rate=lr, epochs=epochs).fit(dataset, w0).weights


# ============= Attention State =============

@dataclass
class AttentionState:
    """Query projection, key projection and attention matrix of one run."""
    query_projection: np.ndarray
    key_projection: np.ndarray
    attention: np.ndarray

    FILES = {
        'query_projection': 'query_projection.bin',
        'key_projection': 'key_projection.bin',
        'attention': 'attention_matrix.bin',
    }

    def __post_init__(self):
        self.query_projection = np.asarray(self.query_projection, dtype=np.float64)
        self.key_projection = np.asarray(self.key_projection, dtype=np.float64)
        self.attention = np.asarray(self.attention, dtype=np.float64)
        if self.query_projection.shape[1] != self.key_projection.shape[1]:
            raise ShapeError("query and key projections must read the same channel count")
        if self.attention.shape != (self.query_size, self.key_size):
            raise ShapeError(
                f"attention matrix {self.attention.shape} does not match "
                f"({self.query_size}, {self.key_size})"
            )

    @property
    def query_size(self) -> int:
        return self.query_projection.shape[0]

    @property
    def key_size(self) -> int:
        return self.key_projection.shape[0]

    @property
    def channels(self) -> int:
        return self.query_projection.shape[1]

    @classmethod
    def seeded(
        cls,
        channels: int = GRID_DEFAULTS['CHANNELS'],
        query_size: int = ATTENTION_DEFAULTS['QUERY_SIZE'],
        key_size: int = ATTENTION_DEFAULTS['KEY_SIZE'],
        seed: int = 0,
        init_scale: float = ATTENTION_DEFAULTS['INIT_SCALE']
    ) -> 'AttentionState':
        bound = 1.0 / math.sqrt(channels)
        query_projection = uniform_stream(derive_seed(seed, 0), query_size * channels, -bound, bound)
        key_projection = uniform_stream(derive_seed(seed, 1), key_size * channels, -bound, bound)
        attention = init_scale * uniform_stream(derive_seed(seed, 2), query_size * key_size, -1.0, 1.0)
        return cls(
            query_projection=query_projection.reshape(query_size, channels),
            key_projection=key_projection.reshape(key_size, channels),
            attention=attention.reshape(query_size, key_size),
        )

    def with_attention(self, attention: np.ndarray) -> 'AttentionState':
        return AttentionState(self.query_projection, self.key_projection, attention)

    def encode_query(self, image: PseudoImage) -> QueryVector:
        return encode_query(image, self.query_projection)

    def encode_key(self, image: PseudoImage) -> KeyVector:
        return encode_key(image, self.key_projection)

    def score(self, query, key) -> float:
        return matching_score(query, key, self.attention)

    def save(self, directory: Union[str, Path]) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for attribute, filename in self.FILES.items():
            write_tensor(directory / filename, getattr(self, attribute))

    @classmethod
    def load(cls, directory: Union[str, Path]) -> 'AttentionState':
        directory = Path(directory)
        return cls(**{
            attribute: read_tensor(directory / filename)
            for attribute, filename in cls.FILES.items()
        })
