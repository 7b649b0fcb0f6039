# detector.py
"""Single-scale grid detector operating on a flat parameter vector"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from config import DetectorConfig
from core_model import BoundingBox, DataError, Detection, InvalidInputError, NumericError

logger = logging.getLogger(__name__)

_HEADER = np.dtype('<u8')
_VALUES = np.dtype('<f8')


@dataclass(frozen=True, eq=False)
class ParameterVector:
    """Immutable flat float64 view of all detector weights"""
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise InvalidInputError(f"parameter vector must be 1-D, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise NumericError("parameter vector contains non-finite entries")
        values.setflags(write=False)
        object.__setattr__(self, 'values', values)

    def __len__(self) -> int:
        return self.values.shape[0]

    @classmethod
    def zeros(cls, length: int) -> 'ParameterVector':
        return cls(np.zeros(length))

    def as_tensor(self) -> torch.Tensor:
        return torch.tensor(self.values, dtype=torch.float64)

    def equals(self, other: 'ParameterVector') -> bool:
        """Bitwise equality"""
        return self.values.tobytes() == other.values.tobytes()

    def save(self, path: Union[str, Path]):
        """Write the checkpoint: 8-byte little-endian length, then little-endian float64 values"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'wb') as f:
            f.write(np.array([len(self)], dtype=_HEADER).tobytes())
            f.write(self.values.astype(_VALUES).tobytes())

    @classmethod
    def load(cls, path: Union[str, Path], expected_length: Optional[int] = None) -> 'ParameterVector':
        path = Path(path)
        if not path.exists():
            raise DataError(f"Checkpoint not found: {path}")
        raw = path.read_bytes()
        if len(raw) < _HEADER.itemsize:
            raise DataError(f"Checkpoint {path} is truncated")
        length = int(np.frombuffer(raw[:_HEADER.itemsize], dtype=_HEADER)[0])
        body = raw[_HEADER.itemsize:]
        if len(body) != length * _VALUES.itemsize:
            raise DataError(f"Checkpoint {path} declares {length} values but holds {len(body) // _VALUES.itemsize}")
        if expected_length is not None and length != expected_length:
            raise DataError(f"Checkpoint {path} has {length} values, detector expects {expected_length}")
        return cls(np.frombuffer(body, dtype=_VALUES).astype(np.float64))


@dataclass(frozen=True, eq=False)
class RawPrediction:
    """Per-cell head output of shape (G, G, 5): objectness logit, tx, ty, tw, th"""
    raw: torch.Tensor
    box_prior: float

    def __post_init__(self):
        if self.raw.dim() != 3 or self.raw.shape[0] != self.raw.shape[1] or self.raw.shape[2] != 5:
            raise InvalidInputError(f"raw prediction must have shape (G, G, 5), got {tuple(self.raw.shape)}")

    @property
    def grid_size(self) -> int:
        return self.raw.shape[0]

    @property
    def logits(self) -> torch.Tensor:
        return self.raw[..., 0]

    @property
    def confidence(self) -> torch.Tensor:
        return torch.sigmoid(self.raw[..., 0])

    @property
    def boxes(self) -> torch.Tensor:
        """Decoded (G, G, 4) boxes in normalized center-size form"""
        return decode_boxes(self.raw, self.box_prior)


def decode_boxes(raw: torch.Tensor, box_prior: float) -> torch.Tensor:
    # cx = (gx + sigmoid(tx)) / G, w = exp(tw) * prior clipped to (0, 1]
    g = raw.shape[0]
    cells = torch.arange(g, dtype=raw.dtype)
    gy, gx = torch.meshgrid(cells, cells, indexing='ij')
    cx = (gx + torch.sigmoid(raw[..., 1])) / g
    cy = (gy + torch.sigmoid(raw[..., 2])) / g
    w = torch.clamp(torch.exp(torch.clamp(raw[..., 3], -20.0, 10.0)) * box_prior, 1e-9, 1.0)
    h = torch.clamp(torch.exp(torch.clamp(raw[..., 4], -20.0, 10.0)) * box_prior, 1e-9, 1.0)
    return torch.stack([cx, cy, w, h], dim=-1)


class GridDetector:
    """Three smooth conv layers with average pooling, then a per-cell linear head"""

    def __init__(self, config: DetectorConfig):
        self.config = config
        c1, c2, c3 = config.channels
        self._shapes: List[Tuple[str, Tuple[int, ...]]] = [
            ('conv1.weight', (c1, 1, 3, 3)), ('conv1.bias', (c1,)),
            ('conv2.weight', (c2, c1, 3, 3)), ('conv2.bias', (c2,)),
            ('conv3.weight', (c3, c2, 3, 3)), ('conv3.bias', (c3,)),
            ('head.weight', (5, c3, 1, 1)), ('head.bias', (5,)),
        ]
        self.offsets: Dict[str, slice] = {}
        start = 0
        for name, shape in self._shapes:
            size = math.prod(shape)
            self.offsets[name] = slice(start, start + size)
            start += size
        self.parameter_count = start

    @property
    def grid_size(self) -> int:
        return self.config.grid_size

    def init_params(self, seed: int) -> ParameterVector:
        """He-style random init; objectness bias starts at a 1% prior"""
        rng = np.random.default_rng(seed)
        values = np.zeros(self.parameter_count)
        for name, shape in self._shapes:
            if name.endswith('.weight'):
                fan_in = math.prod(shape[1:])
                std = math.sqrt(2.0 / fan_in)
                if name.startswith('head'):
                    std *= self.config.init_scale
                values[self.offsets[name]] = rng.normal(0.0, std, size=math.prod(shape))
        values[self.offsets['head.bias'].start] = math.log(0.01 / 0.99)
        return ParameterVector(values)

    def unpack(self, params: torch.Tensor) -> Dict[str, torch.Tensor]:
        if params.shape[0] != self.parameter_count:
            raise InvalidInputError(f"expected {self.parameter_count} parameters, got {params.shape[0]}")
        return {name: params[self.offsets[name]].reshape(shape) for name, shape in self._shapes}

    def as_tensor(self, params: Union[ParameterVector, torch.Tensor]) -> torch.Tensor:
        if isinstance(params, ParameterVector):
            return params.as_tensor()
        return params

    def _check_frame(self, frame: np.ndarray):
        size = self.config.image_size
        if frame.ndim != 2 or frame.shape != (size, size):
            raise InvalidInputError(f"frame must be {size}x{size}, got {frame.shape}")

    def forward_tensor(self, params: torch.Tensor, frames: Sequence[np.ndarray]) -> torch.Tensor:
        """Differentiable forward of a frame batch, returns (B, G, G, 5)"""
        for frame in frames:
            self._check_frame(frame)
        w = self.unpack(params)
        p1, p2 = self.config.pool_factors
        x = torch.from_numpy(np.stack([np.asarray(f, dtype=np.float64) for f in frames]))[:, None]
        x = F.silu(F.conv2d(x, w['conv1.weight'], w['conv1.bias'], padding=1))
        x = F.avg_pool2d(x, p1)
        x = F.silu(F.conv2d(x, w['conv2.weight'], w['conv2.bias'], padding=1))
        x = F.avg_pool2d(x, p2)
        x = F.silu(F.conv2d(x, w['conv3.weight'], w['conv3.bias'], padding=1))
        x = F.conv2d(x, w['head.weight'], w['head.bias'])
        return x.permute(0, 2, 3, 1)

    def forward_batch(self, params: Union[ParameterVector, torch.Tensor],
                      frames: Sequence[np.ndarray]) -> List[RawPrediction]:
        if len(frames) == 0:
            return []
        out = self.forward_tensor(self.as_tensor(params), frames)
        return [RawPrediction(out[i], self.config.box_prior) for i in range(out.shape[0])]

    def forward(self, params: Union[ParameterVector, torch.Tensor], frame: np.ndarray) -> RawPrediction:
        return self.forward_batch(params, [frame])[0]

    def detect_batch(self, params: Union[ParameterVector, torch.Tensor], frames: Sequence[np.ndarray],
                     conf_threshold: float, nms_iou: Optional[float] = None) -> List[List[Detection]]:
        """forward -> decode -> NMS for every frame, without gradients"""
        nms_iou = self.config.nms_iou if nms_iou is None else nms_iou
        with torch.no_grad():
            preds = self.forward_batch(params, frames)
        return [nms(decode(pred, conf_threshold), nms_iou) for pred in preds]

    def detect(self, params: Union[ParameterVector, torch.Tensor], frame: np.ndarray,
               conf_threshold: float, nms_iou: Optional[float] = None) -> List[Detection]:
        return self.detect_batch(params, [frame], conf_threshold, nms_iou)[0]


def decode(pred: RawPrediction, conf_threshold: float) -> List[Detection]:
    """Candidate detections with confidence strictly above the threshold, in cell order"""
    if not 0.0 <= conf_threshold <= 1.0:
        raise InvalidInputError(f"confidence threshold outside [0,1]: {conf_threshold}")
    with torch.no_grad():
        conf = pred.confidence.reshape(-1).numpy()
        boxes = pred.boxes.reshape(-1, 4).numpy()
    detections = []
    for cell in np.flatnonzero(conf > conf_threshold):
        cx, cy, w, h = (float(v) for v in boxes[cell])
        detections.append(Detection(BoundingBox(cx, cy, w, h), float(conf[cell]), int(cell)))
    return detections


def iou_corners(a: Tuple[float, float, float, float], b: Tuple[float, float, float, float]) -> float:
    inter_w = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    inter_h = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = inter_w * inter_h
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of the (clipped) corner boxes"""
    return iou_corners(a.to_corners(), b.to_corners())


def _nms_key(det: Detection):
    return (-det.confidence, det.cell_index, det.box.cx, det.box.cy, det.box.w, det.box.h)


def nms(detections: Sequence[Detection], iou_threshold: float) -> List[Detection]:
    """Greedy suppression in descending confidence; ties go to the lower cell index"""
    if not 0.0 <= iou_threshold <= 1.0:
        raise InvalidInputError(f"IoU threshold outside [0,1]: {iou_threshold}")
    keep: List[Detection] = []
    for det in sorted(detections, key=_nms_key):
        corners = det.box.to_corners()
        if all(iou_corners(corners, k.box.to_corners()) <= iou_threshold for k in keep):
            keep.append(det)
    return keep


LossFn = Callable[[torch.Tensor, Any], Union[torch.Tensor, float]]


def value_and_gradient(params: ParameterVector, batch: Any, loss_fn: LossFn) -> Tuple[float, ParameterVector]:
    """Evaluate loss_fn(params, batch) and its gradient with respect to params"""
    theta = params.as_tensor().requires_grad_(True)
    loss = loss_fn(theta, batch)
    if not isinstance(loss, torch.Tensor):
        loss = torch.as_tensor(loss, dtype=torch.float64)
    value = float(loss.detach())
    if not math.isfinite(value):
        raise NumericError(f"non-finite loss: {value}")
    if not loss.requires_grad:
        return value, ParameterVector.zeros(len(params))
    (grad,) = torch.autograd.grad(loss, theta, allow_unused=True)
    if grad is None:
        return value, ParameterVector.zeros(len(params))
    grad = grad.detach().numpy()
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient")
    return value, ParameterVector(grad)


def gradient(params: ParameterVector, batch: Any, loss_fn: LossFn) -> ParameterVector:
    return value_and_gradient(params, batch, loss_fn)[1]
