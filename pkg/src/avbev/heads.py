"""BEV perception heads and instance decoding.

Semantic classes are independent binary masks (they overlap: a vehicle sits
on drivable area), so the semantic head emits one logit map per class.
Instance outputs follow the center/offset/flow convention: a heatmap of
instance centers, per-cell vectors pointing at the owning center (in cell
units, (d_row, d_col)), and a per-step future displacement field.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .geometry import BevGrid

SEMANTIC_CLASSES = ("drivable", "lane", "vehicle", "pedestrian")
DECODE_THRESHOLD = 0.3
NMS_RADIUS = 2


@dataclass
class SemanticOutput:
    logits: Tensor               # (K, H, W)

    @property
    def classes(self) -> int:
        return self.logits.shape[0]

    def probabilities(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.logits.data))

    def masks(self, threshold: float = 0.5) -> np.ndarray:
        return self.probabilities() >= threshold


@dataclass
class InstanceOutput:
    heatmap: Tensor              # (1, H, W), sigmoid applied, in [0, 1]
    offsets: Tensor              # (2, H, W), cells toward owning center
    flow: Tensor                 # (2, H, W), cells per step


@dataclass
class PanopticScores:
    pq: float
    sq: float
    rq: float
    true_positives: int
    false_positives: int
    false_negatives: int


class SemanticHead:
    """Two 3x3 convolutions; the second emits the per-class logits."""

    def __init__(self, rng, channels: int, n_classes: int = len(SEMANTIC_CLASSES),
                 hidden: int = 24, name: str = "sem_head"):
        self.conv1 = nn.Conv2d(rng, channels, hidden, 3, f"{name}.conv1", padding=1)
        self.conv2 = nn.Conv2d(rng, hidden, n_classes, 3, f"{name}.conv2", padding=1)

    def parameters(self):
        return {**self.conv1.parameters(), **self.conv2.parameters()}

    def __call__(self, grid: BevGrid) -> SemanticOutput:
        x = ad.reshape(grid.features, (1,) + grid.features.shape)
        x = ad.relu(self.conv1(x))
        x = self.conv2(x)
        return SemanticOutput(ad.reshape(x, x.shape[1:]))


class InstanceHead:
    """Shared 3x3 trunk, then 1x1 heads for heatmap, offsets and flow."""

    def __init__(self, rng, channels: int, hidden: int = 24, name: str = "inst_head"):
        self.trunk = nn.Conv2d(rng, channels, hidden, 3, f"{name}.trunk", padding=1)
        self.heat = nn.Conv2d(rng, hidden, 1, 1, f"{name}.heat")
        self.offs = nn.Conv2d(rng, hidden, 2, 1, f"{name}.offs")
        self.flow = nn.Conv2d(rng, hidden, 2, 1, f"{name}.flow")

    def parameters(self):
        return {**self.trunk.parameters(), **self.heat.parameters(),
                **self.offs.parameters(), **self.flow.parameters()}

    def __call__(self, grid: BevGrid, raw_heat: bool = False):
        x = ad.reshape(grid.features, (1,) + grid.features.shape)
        h = ad.relu(self.trunk(x))
        heat_logits = ad.reshape(self.heat(h), grid.features.shape[1:])
        heat_logits = ad.reshape(heat_logits, (1,) + heat_logits.shape)
        offsets = ad.reshape(self.offs(h), (2,) + grid.features.shape[1:])
        flow = ad.reshape(self.flow(h), (2,) + grid.features.shape[1:])
        if raw_heat:
            return InstanceOutput(heat_logits, offsets, flow)
        return InstanceOutput(ad.sigmoid(heat_logits), offsets, flow)


# ---------------------------------------------------------------------------
# instance decoding
# ---------------------------------------------------------------------------

def find_centers(heatmap: np.ndarray, threshold: float = DECODE_THRESHOLD,
                 nms_radius: int = NMS_RADIUS) -> list[tuple[int, int, float]]:
    """Local maxima of the heatmap at or above the threshold.

    Within its (2r+1)^2 window a center must beat every earlier cell in
    row-major order strictly and every later cell weakly, so plateaus
    produce exactly one center (the first in scan order).  Results are
    sorted by descending score, ties by scan order.
    """
    h, w = heatmap.shape
    centers = []
    for r in range(h):
        for c in range(w):
            v = heatmap[r, c]
            if v < threshold:
                continue
            is_max = True
            for rr in range(max(0, r - nms_radius), min(h, r + nms_radius + 1)):
                for cc in range(max(0, c - nms_radius), min(w, c + nms_radius + 1)):
                    if (rr, cc) == (r, c):
                        continue
                    other = heatmap[rr, cc]
                    if (rr, cc) < (r, c):
                        if other >= v:
                            is_max = False
                            break
                    elif other > v:
                        is_max = False
                        break
                if not is_max:
                    break
            if is_max:
                centers.append((r, c, float(v)))
    centers.sort(key=lambda t: (-t[2], t[0], t[1]))
    return centers


def decode_instances(inst: InstanceOutput | tuple, threshold: float = DECODE_THRESHOLD,
                     nms_radius: int = NMS_RADIUS) -> np.ndarray:
    """Assign foreground cells (heatmap >= threshold/2) to decoded centers.

    Each foreground cell goes to the center nearest to (cell + offset);
    distance ties favor the higher-ranked (higher-scoring) center.  Ids are
    1-based in descending center-score order; 0 is background.
    """
    if isinstance(inst, InstanceOutput):
        heat = inst.heatmap.data[0]
        offs = inst.offsets.data
    else:
        heat, offs = inst
    h, w = heat.shape
    ids = np.zeros((h, w), dtype=np.int32)
    centers = find_centers(heat, threshold, nms_radius)
    if not centers:
        return ids
    cr = np.array([c[0] for c in centers], dtype=np.float64)
    cc = np.array([c[1] for c in centers], dtype=np.float64)
    fg_r, fg_c = np.nonzero(heat >= threshold / 2.0)
    tr = fg_r + offs[0, fg_r, fg_c]
    tc = fg_c + offs[1, fg_r, fg_c]
    d2 = (tr[:, None] - cr[None, :]) ** 2 + (tc[:, None] - cc[None, :]) ** 2
    ids[fg_r, fg_c] = np.argmin(d2, axis=1) + 1   # argmin takes first on ties
    return ids


def perfect_instance_output(instance_map: np.ndarray,
                            threshold: float = DECODE_THRESHOLD) -> tuple:
    """(heatmap, offsets) that decode back to ``instance_map`` exactly.

    Centers carry value 1.0, other instance cells carry a value in
    [threshold/2, threshold) so they are foreground but not centers, and
    offsets point exactly at the owning instance's center cell.
    """
    h, w = instance_map.shape
    heat = np.zeros((h, w))
    offs = np.zeros((2, h, w))
    body = (threshold / 2.0 + threshold) / 2.0
    for iid in np.unique(instance_map):
        if iid == 0:
            continue
        rr, cc = np.nonzero(instance_map == iid)
        cr = int(round(rr.mean()))
        ccen = int(round(cc.mean()))
        heat[rr, cc] = body
        heat[cr, ccen] = 1.0
        offs[0, rr, cc] = cr - rr
        offs[1, rr, cc] = ccen - cc
    return heat, offs


def relabel_canonical(ids: np.ndarray) -> np.ndarray:
    """Renumber instance ids by first appearance in row-major scan order."""
    out = np.zeros_like(ids)
    mapping: dict[int, int] = {}
    flat = ids.ravel()
    res = out.ravel()
    for i, v in enumerate(flat):
        if v == 0:
            continue
        if v not in mapping:
            mapping[v] = len(mapping) + 1
        res[i] = mapping[v]
    return out
