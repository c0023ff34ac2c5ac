"""
Region Proposal Network

Forward-only layer graph of the detection backbone and head, with shape
verification, seeded weights, anchor generation and matching, box-delta
encoding and the loss stack (focal classification, smooth-L1 location,
direction cross-entropy, weighted total).

Backbone: three stride-2 conv blocks (4, 6 and 6 layers of 3x3 conv),
each followed by a transposed conv bringing its output to half the input
resolution, concatenated and fed to two 1x1 heads. Every conv and deconv
is followed by inference batch norm and ReLU; the heads are not.
"""

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view

from config.constants import (
    ANCHOR_ORIENTATIONS, ANCHOR_SPECS, LOSS_DEFAULTS, MATCHING, ObjectClass
)
from models.geometry import Box3D, bev_iou_matrix, normalize_yaw
from models.tensors import PseudoImage, read_tensor, write_tensor
from utils.common import derive_seed, uniform_stream
from utils.errors import GeometryError, LossDomainError, ShapeError, ValidationError
from utils.logging import get_logger

logger = get_logger(__name__)

BOX_PARAMS = 7


# ============= Layer Graph =============

@dataclass(frozen=True)
class LayerSpec:
    """One conv or transposed-conv layer of the graph."""
    name: str
    block: str
    kind: str
    kernel: int
    in_channels: int
    out_channels: int
    stride: int
    padding: int
    source: Optional[str] = None
    activation: bool = True

    def __post_init__(self):
        if self.kind not in ('conv', 'deconv'):
            raise ValidationError(f"{self.name}: unknown layer kind {self.kind!r}")
        if min(self.kernel, self.in_channels, self.out_channels) < 1 or self.stride < 1 or self.padding < 0:
            raise ValidationError(f"{self.name}: dimensions must be positive, strides >= 1")

    def output_size(self, size: int) -> int:
        if self.kind == 'conv':
            return (size + 2 * self.padding - self.kernel) // self.stride + 1
        return (size - 1) * self.stride - 2 * self.padding + self.kernel


@dataclass
class RPNGraph:
    """Ordered layers plus the wiring of branches and heads."""
    layers: List[LayerSpec]
    branches: List[str]
    regression_head: str
    classification_head: str

    def __len__(self) -> int:
        return len(self.layers)

    def __iter__(self):
        return iter(self.layers)

    def layer(self, name: str) -> LayerSpec:
        for node in self.layers:
            if node.name == name:
                return node
        raise KeyError(name)

    @property
    def input_channels(self) -> int:
        return self.layers[0].in_channels

    @property
    def anchors_per_cell(self) -> int:
        return self.layer(self.classification_head).out_channels

    @property
    def parameter_count(self) -> int:
        """Kernel and bias entries over all layers; batch norm excluded."""
        return sum(
            node.kernel * node.kernel * node.in_channels * node.out_channels + node.out_channels
            for node in self.layers
        )


def _check_branch_scales(layers: Sequence[LayerSpec], branches: Sequence[str]) -> None:
    """Branch outputs must all land on one resolution for concatenation."""
    scale: Dict[str, float] = {}
    current = 1.0
    for node in layers:
        if node.kind == 'conv' and node.source is None:
            current *= node.stride
            scale[node.name] = current
    branch_scales = {}
    for name in branches:
        node = next(s for s in layers if s.name == name)
        branch_scales[name] = scale[node.source] / node.stride
    reference = branch_scales[branches[0]]
    for name, value in branch_scales.items():
        if value != reference:
            raise ShapeError(
                f"{name} emerges at 1/{value:g} resolution, {branches[0]} at 1/{reference:g}"
            )


def build_rpn_graph(
    input_channels: int = 128,
    block_channels: Sequence[int] = (128, 256, 512),
    block_depths: Sequence[int] = (4, 6, 6),
    block_strides: Sequence[int] = (2, 2, 2),
    deconv_channels: int = 256,
    deconv_strides: Sequence[int] = (1, 2, 4),
    anchors_per_cell: int = 2
) -> RPNGraph:
    """
    Build the layer graph; defaults give the 21-layer architecture.

    Raises:
        ShapeError: If the strides make the upsampled branches disagree
    """
    layers: List[LayerSpec] = []
    block_outputs = []
    channels = input_channels
    for index, (width, depth, stride) in enumerate(zip(block_channels, block_depths, block_strides), 1):
        for position in range(depth):
            layers.append(LayerSpec(
                name=f"conv{index}_{position + 1}", block=f"Conv{index}", kind='conv',
                kernel=3, in_channels=channels, out_channels=width,
                stride=stride if position == 0 else 1, padding=1,
            ))
            channels = width
        block_outputs.append(layers[-1])

    branches = []
    for index, (source, stride) in enumerate(zip(block_outputs, deconv_strides), 1):
        layers.append(LayerSpec(
            name=f"deconv{index}", block=f"DeConv{index}", kind='deconv',
            kernel=stride, in_channels=source.out_channels, out_channels=deconv_channels,
            stride=stride, padding=0, source=source.name,
        ))
        branches.append(layers[-1].name)

    merged = deconv_channels * len(branches)
    layers.append(LayerSpec(
        name='regression', block='Regression', kind='conv', kernel=1,
        in_channels=merged, out_channels=anchors_per_cell * BOX_PARAMS,
        stride=1, padding=0, source='concat', activation=False,
    ))
    layers.append(LayerSpec(
        name='classification', block='Classification', kind='conv', kernel=1,
        in_channels=merged, out_channels=anchors_per_cell,
        stride=1, padding=0, source='concat', activation=False,
    ))

    _check_branch_scales(layers, branches)
    return RPNGraph(layers, branches, 'regression', 'classification')


def forward_shapes(graph: RPNGraph, input_shape: Tuple[int, int, int]) -> List[Tuple[str, Tuple[int, int, int]]]:
    """
    Trace output shapes layer by layer, plus the 'concat' entry.

    Raises:
        ShapeError: If H or W is not divisible by 8, a layer's input
            channels disagree with its source, or branches diverge
    """
    channels, height, width = input_shape
    if height % 8 or width % 8:
        raise ShapeError(f"input spatial size {height} x {width} must be divisible by 8")
    if channels != graph.input_channels:
        raise ShapeError(f"input has {channels} channels, graph expects {graph.input_channels}")

    shapes: Dict[str, Tuple[int, int, int]] = {}
    trace = []
    current = input_shape
    for node in graph.layers:
        if node.source == 'concat' and 'concat' not in shapes:
            branch_shapes = [shapes[name] for name in graph.branches]
            for name, shape in zip(graph.branches, branch_shapes):
                if shape[1:] != branch_shapes[0][1:]:
                    raise ShapeError(
                        f"{name} output {shape} does not match {graph.branches[0]} {branch_shapes[0]}"
                    )
            shapes['concat'] = (sum(s[0] for s in branch_shapes),) + branch_shapes[0][1:]
            trace.append(('concat', shapes['concat']))

        source_shape = shapes[node.source] if node.source else current
        if source_shape[0] != node.in_channels:
            raise ShapeError(
                f"{node.name} expects {node.in_channels} input channels, gets {source_shape[0]}"
            )
        out = (node.out_channels, node.output_size(source_shape[1]), node.output_size(source_shape[2]))
        if min(out[1:]) < 1:
            raise ShapeError(f"{node.name} produces empty output {out}")
        shapes[node.name] = out
        trace.append((node.name, out))
        if node.source is None:
            current = out
    return trace


def format_graph(graph: RPNGraph) -> str:
    """Architecture table: block, layer, filter size, channels, stride, padding."""
    rows = [{
        'Block': node.block,
        'Layer': 'Conv2d' if node.kind == 'conv' else 'Deconv2D',
        'Filter size': f"{node.kernel} x {node.kernel}",
        'Channels': node.out_channels,
        'Stride': node.stride,
        'Padding': node.padding,
    } for node in graph.layers]
    return pd.DataFrame(rows).to_string(index=False)


# ============= Weights =============

@dataclass
class LayerWeights:
    """
    Kernel and bias of one layer, plus batch norm statistics unless a head.

    Conv kernels are (out, in, k, k); transposed-conv kernels (in, out, k, k).
    """
    kernel: np.ndarray
    bias: np.ndarray
    batch_norm: Optional[np.ndarray] = None  # rows: scale, shift, mean, var


class RPNWeights:
    """Weights for every layer of a graph, keyed by layer name."""

    def __init__(self, graph: RPNGraph, layers: Dict[str, LayerWeights]):
        for node in graph.layers:
            if node.name not in layers:
                raise ShapeError(f"missing weights for {node.name}")
            expected = _kernel_shape(node)
            if layers[node.name].kernel.shape != expected:
                raise ShapeError(
                    f"{node.name} kernel {layers[node.name].kernel.shape}, expected {expected}"
                )
            if layers[node.name].batch_norm is not None and not np.all(layers[node.name].batch_norm[3] > 0):
                raise ValidationError(f"{node.name}: batch-norm variances must be > 0")
        self.graph = graph
        self.layers = layers

    def __getitem__(self, name: str) -> LayerWeights:
        return self.layers[name]

    @property
    def parameter_count(self) -> int:
        return sum(w.kernel.size + w.bias.size for w in self.layers.values())

    @classmethod
    def seeded(cls, graph: RPNGraph, seed: int = 0) -> 'RPNWeights':
        """Uniform +-1/sqrt(fan_in) kernels, zero biases, identity batch norm."""
        layers = {}
        for index, node in enumerate(graph.layers):
            shape = _kernel_shape(node)
            bound = 1.0 / math.sqrt(node.in_channels * node.kernel * node.kernel)
            kernel = uniform_stream(derive_seed(seed, index), int(np.prod(shape)), -bound, bound)
            batch_norm = None
            if node.activation:
                batch_norm = np.vstack([
                    np.ones(node.out_channels), np.zeros(node.out_channels),
                    np.zeros(node.out_channels), np.ones(node.out_channels),
                ])
            layers[node.name] = LayerWeights(kernel.reshape(shape), np.zeros(node.out_channels), batch_norm)
        return cls(graph, layers)

    def save(self, directory: Union[str, Path]) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for node in self.graph.layers:
            weights = self.layers[node.name]
            write_tensor(directory / f"{node.name}_kernel.bin", weights.kernel.reshape(weights.kernel.shape[0], -1))
            write_tensor(directory / f"{node.name}_bias.bin", weights.bias)
            if weights.batch_norm is not None:
                write_tensor(directory / f"{node.name}_bn.bin", weights.batch_norm)

    @classmethod
    def load(cls, graph: RPNGraph, directory: Union[str, Path]) -> 'RPNWeights':
        directory = Path(directory)
        layers = {}
        for node in graph.layers:
            shape = _kernel_shape(node)
            kernel = read_tensor(directory / f"{node.name}_kernel.bin")
            if kernel.size != int(np.prod(shape)):
                raise ShapeError(f"{node.name} kernel file holds {kernel.size} values, expected {shape}")
            bn_path = directory / f"{node.name}_bn.bin"
            layers[node.name] = LayerWeights(
                kernel.reshape(shape),
                read_tensor(directory / f"{node.name}_bias.bin").reshape(-1),
                read_tensor(bn_path) if bn_path.exists() else None,
            )
        return cls(graph, layers)


def _kernel_shape(node: LayerSpec) -> Tuple[int, int, int, int]:
    if node.kind == 'conv':
        return node.out_channels, node.in_channels, node.kernel, node.kernel
    return node.in_channels, node.out_channels, node.kernel, node.kernel


# ============= Forward Pass =============

def conv2d(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Direct 2-D convolution of a (C, H, W) map with an (O, C, k, k) kernel."""
    out_channels, in_channels, k, _ = kernel.shape
    if x.shape[0] != in_channels:
        raise ShapeError(f"conv input has {x.shape[0]} channels, kernel expects {in_channels}")
    padded = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(padded, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    out = np.tensordot(kernel, windows, axes=([1, 2, 3], [0, 3, 4]))
    return out + bias[:, None, None]


def conv_transpose2d(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Transposed convolution of a (C, H, W) map with a (C, O, k, k) kernel."""
    in_channels, out_channels, k, _ = kernel.shape
    if x.shape[0] != in_channels:
        raise ShapeError(f"deconv input has {x.shape[0]} channels, kernel expects {in_channels}")
    _, height, width = x.shape
    full_h = (height - 1) * stride + k
    full_w = (width - 1) * stride + k
    out = np.zeros((out_channels, full_h, full_w))
    for a in range(k):
        for b in range(k):
            contribution = np.tensordot(kernel[:, :, a, b], x, axes=([0], [0]))
            out[:, a:a + (height - 1) * stride + 1:stride, b:b + (width - 1) * stride + 1:stride] += contribution
    if padding:
        out = out[:, padding:full_h - padding, padding:full_w - padding]
    return out + bias[:, None, None]


def _batch_norm_relu(x: np.ndarray, batch_norm: np.ndarray) -> np.ndarray:
    scale, shift, mean, var = batch_norm
    normalized = (x - mean[:, None, None]) / np.sqrt(var)[:, None, None]
    return np.maximum(normalized * scale[:, None, None] + shift[:, None, None], 0.0)


def apply_layer(node: LayerSpec, weights: LayerWeights, x: np.ndarray) -> np.ndarray:
    if node.kind == 'conv':
        out = conv2d(x, weights.kernel, weights.bias, node.stride, node.padding)
    else:
        out = conv_transpose2d(x, weights.kernel, weights.bias, node.stride, node.padding)
    if node.activation and weights.batch_norm is not None:
        out = _batch_norm_relu(out, weights.batch_norm)
    return out


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def forward(graph: RPNGraph, weights: RPNWeights, image: Union[PseudoImage, np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    """
    Run the network on a fused pseudo-image.

    Returns:
        (score map of sigmoid probabilities, regression map)
    """
    x = image.data if isinstance(image, PseudoImage) else np.asarray(image)
    x = x.astype(np.float64)
    forward_shapes(graph, x.shape)

    outputs: Dict[str, np.ndarray] = {}
    current = x
    for node in graph.layers:
        if node.source == 'concat':
            if 'concat' not in outputs:
                outputs['concat'] = np.concatenate([outputs[name] for name in graph.branches], axis=0)
            source = outputs['concat']
        else:
            source = outputs[node.source] if node.source else current
        outputs[node.name] = apply_layer(node, weights[node.name], source)
        if node.source is None:
            current = outputs[node.name]

    logger.debug(f"RPN forward on {x.shape}: heads {outputs[graph.regression_head].shape}")
    return sigmoid(outputs[graph.classification_head]), outputs[graph.regression_head]


# ============= Anchors =============

@dataclass(frozen=True)
class Anchor:
    """Class-sized box on the head grid at orientation 0 or 90 degrees."""
    box: Box3D
    orientation: int
    object_class: ObjectClass
    cell: Tuple[int, int]


def generate_anchors(
    grid,
    class_specs: Optional[Dict[ObjectClass, Dict]] = None,
    stride: int = 2,
    orientations: Sequence[float] = ANCHOR_ORIENTATIONS
) -> List[Anchor]:
    """
    One anchor per head cell, per class, per orientation.

    Args:
        grid: PillarGrid of the input pseudo-image
        class_specs: Mapping class -> {'size': (w, l, h), 'z_center': z}
        stride: Downsampling from pillar grid to head grid
        orientations: Anchor yaws in degrees

    Returns:
        Anchors ordered by row, column, class, orientation
    """
    class_specs = class_specs or ANCHOR_SPECS
    rows = grid.height // stride
    cols = grid.width // stride
    cell_x = grid.pillar_size[0] * stride
    cell_y = grid.pillar_size[1] * stride

    anchors = []
    for row in range(rows):
        y = grid.y_range[0] + (row + 0.5) * cell_y
        for col in range(cols):
            x = grid.x_range[0] + (col + 0.5) * cell_x
            for object_class, node in class_specs.items():
                for degrees in orientations:
                    box = Box3D((x, y, node['z_center']), node['size'], math.radians(degrees))
                    anchors.append(Anchor(box, int(degrees), object_class, (row, col)))
    return anchors


def match_anchors(
    anchors: Sequence[Anchor],
    gt_boxes: Sequence[Box3D],
    gt_classes: Optional[Sequence[ObjectClass]] = None,
    positive_iou: float = MATCHING['POSITIVE_IOU'],
    negative_iou: float = MATCHING['NEGATIVE_IOU']
) -> np.ndarray:
    """
    Label anchors by BEV IoU with ground truth.

    Positive (1) when IoU >= positive_iou or the anchor is some ground
    truth's best match; negative (0) when the best IoU is below
    negative_iou; ignored (-1) otherwise. With gt_classes, anchors only
    match ground truth of their own class.
    """
    labels = np.zeros(len(anchors), dtype=np.int8)
    if not len(anchors) or not len(gt_boxes):
        return labels

    iou = bev_iou_matrix([a.box for a in anchors], list(gt_boxes))
    if gt_classes is not None:
        anchor_classes = np.array([a.object_class.value for a in anchors])
        gt_class_values = np.array([c.value for c in gt_classes])
        iou = np.where(anchor_classes[:, None] == gt_class_values[None, :], iou, 0.0)

    best = iou.max(axis=1)
    labels[(best >= negative_iou) & (best < positive_iou)] = -1
    labels[best >= positive_iou] = 1

    column_best = iou.max(axis=0)
    for j, value in enumerate(column_best):
        if value > 0.0:
            labels[iou[:, j] == value] = 1
    return labels


# ============= Box Deltas =============

@dataclass(frozen=True)
class BoxDelta:
    """Regression target of one anchor; dtheta is a sine."""
    dx: float
    dy: float
    dz: float
    dw: float
    dl: float
    dh: float
    dtheta: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in self.as_array()):
            raise ValidationError(f"box delta must be finite: {self}")
        if abs(self.dtheta) > 1.0 + 1e-12:
            raise ValidationError(f"dtheta is a sine, got {self.dtheta}")

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dz, self.dw, self.dl, self.dh, self.dtheta])

    @classmethod
    def from_array(cls, values: Sequence[float]) -> 'BoxDelta':
        return cls(*(float(v) for v in values))


def _anchor_box(anchor: Union[Anchor, Box3D]) -> Box3D:
    return anchor.box if isinstance(anchor, Anchor) else anchor


def encode_delta(anchor: Union[Anchor, Box3D], gt: Box3D) -> BoxDelta:
    """Residuals of gt relative to anchor, offsets scaled by the footprint diagonal."""
    a = _anchor_box(anchor)
    if min(a.size) <= 0 or min(gt.size) <= 0:
        raise GeometryError("box sizes must be > 0")
    diagonal = math.hypot(a.width, a.length)
    return BoxDelta(
        dx=(gt.center[0] - a.center[0]) / diagonal,
        dy=(gt.center[1] - a.center[1]) / diagonal,
        dz=(gt.center[2] - a.center[2]) / a.height,
        dw=math.log(gt.width / a.width),
        dl=math.log(gt.length / a.length),
        dh=math.log(gt.height / a.height),
        dtheta=math.sin(gt.yaw - a.yaw),
    )


def decode_delta(anchor: Union[Anchor, Box3D], delta: BoxDelta) -> Box3D:
    """Inverse of encode_delta for yaw differences within (-pi/2, pi/2)."""
    a = _anchor_box(anchor)
    diagonal = math.hypot(a.width, a.length)
    return Box3D(
        (a.center[0] + delta.dx * diagonal,
         a.center[1] + delta.dy * diagonal,
         a.center[2] + delta.dz * a.height),
        (a.width * math.exp(delta.dw),
         a.length * math.exp(delta.dl),
         a.height * math.exp(delta.dh)),
        normalize_yaw(a.yaw + math.asin(max(-1.0, min(1.0, delta.dtheta)))),
    )


# ============= Losses =============

def focal_loss(score: float, eta: float = LOSS_DEFAULTS['FOCAL_ETA'], gamma: float = LOSS_DEFAULTS['FOCAL_GAMMA']) -> float:
    """-eta (1 - p)^gamma log p for p in (0, 1)."""
    if not 0.0 < score < 1.0:
        raise LossDomainError(f"focal loss needs a score in (0, 1), got {score}")
    return -eta * (1.0 - score) ** gamma * math.log(score)


def smooth_l1(x: float) -> float:
    ax = abs(x)
    return 0.5 * x * x if ax < 1.0 else ax - 0.5


def localization_loss(delta_pred: BoxDelta, delta_gt: BoxDelta) -> float:
    """Sum of smooth-L1 over the seven residuals."""
    residuals = delta_pred.as_array() - delta_gt.as_array()
    return float(sum(smooth_l1(float(r)) for r in residuals))


def direction_target(theta: float) -> int:
    """1 when the ground-truth heading is positive, else 0."""
    return 1 if normalize_yaw(theta) > 0.0 else 0


def direction_loss(target: int, estimate: float) -> float:
    """Binary cross-entropy of the heading classifier."""
    if not 0.0 < estimate < 1.0:
        raise LossDomainError(f"direction estimate must be in (0, 1), got {estimate}")
    if target not in (0, 1):
        raise LossDomainError(f"direction target must be 0 or 1, got {target}")
    return -(target * math.log(estimate) + (1 - target) * math.log(1.0 - estimate))


def total_loss(
    cls_loss: float,
    loc_loss: float,
    dir_loss: float,
    n_pos: int,
    beta_cls: float = LOSS_DEFAULTS['BETA_CLS'],
    beta_loc: float = LOSS_DEFAULTS['BETA_LOC'],
    beta_dir: float = LOSS_DEFAULTS['BETA_DIR']
) -> float:
    """Weighted sum normalized by the positive anchor count."""
    if n_pos < 1:
        raise LossDomainError("total loss needs at least one positive anchor")
    return (beta_cls * cls_loss + beta_loc * loc_loss + beta_dir * dir_loss) / n_pos


def anchor_losses(
    anchors: Sequence[Anchor],
    labels: np.ndarray,
    scores: np.ndarray,
    predicted: Sequence[BoxDelta],
    direction_estimates: np.ndarray,
    gt_boxes: Sequence[Box3D]
) -> float:
    """
    Total loss of one frame from per-anchor head outputs.

    Positives contribute focal loss on their score, location loss against
    their best-overlapping ground truth and direction loss; negatives
    contribute focal loss on 1 - score; ignored anchors nothing.
    """
    positives = np.flatnonzero(labels == 1)
    if not len(positives):
        raise LossDomainError("frame has no positive anchors")

    iou = bev_iou_matrix([anchors[i].box for i in positives], list(gt_boxes))
    cls_loss = sum(focal_loss(float(scores[i])) for i in positives)
    cls_loss += sum(focal_loss(1.0 - float(scores[i])) for i in np.flatnonzero(labels == 0))

    loc_loss = 0.0
    dir_loss = 0.0
    for row, index in enumerate(positives):
        gt = gt_boxes[int(np.argmax(iou[row]))]
        loc_loss += localization_loss(predicted[index], encode_delta(anchors[index], gt))
        dir_loss += direction_loss(direction_target(gt.yaw), float(direction_estimates[index]))
    return total_loss(cls_loss, loc_loss, dir_loss, len(positives))
