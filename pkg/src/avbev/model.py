"""Full pipeline assembly: cameras -> BEV -> text fusion -> heads.

One DrivingModel owns every learnable block and a flat parameter registry
(used by the optimizer and the AVBW checkpoint).  Forward passes carry a
module guard that raises NumericError naming the first stage whose output
went non-finite, which is what the trainer reports on aborts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .config import RunConfig
from .geometry import (BevGrid, BevGridSpec, ImageEncoder, build_ring_rig,
                       frustum_points, lift_features, normalize_depth,
                       splat_cameras)
from .heads import (InstanceHead, InstanceOutput, SemanticHead,
                    SemanticOutput)
from .planner import Costmap, CostmapHead, TrajectoryRefiner
from .temporal import (BevSequence, EgoPose, TemporalFuser, align_sequence,
                       pose_to_transform, warp_bev)
from .textfusion import (EmbeddingTable, FilmMlp, FusionGate, TextEmbedding,
                         modulate, stub_embed, weighted_fuse)

N_CAMERAS = 6


class NumericError(RuntimeError):
    """Raised on non-finite values or a failed numeric check."""

    @classmethod
    def in_module(cls, module: str) -> "NumericError":
        err = cls(f"non-finite output first appeared in module {module!r}")
        err.module = module
        return err


def _guard(module: str, *tensors: Tensor):
    for t in tensors:
        if not np.isfinite(t.data).all():
            raise NumericError.in_module(module)


@dataclass
class PipelineOutputs:
    bev: BevGrid                 # temporally fused feature s
    fused: BevGrid               # after text modulation and gating
    semantic: SemanticOutput
    instance: InstanceOutput     # heatmap holds raw logits
    costmap: Costmap
    front_feature: Tensor        # pooled front-camera encoder feature
    text_used: bool


class DrivingModel:
    def __init__(self, cfg: RunConfig, rng: np.random.Generator | None = None):
        self.cfg = cfg
        rng = rng or np.random.default_rng(cfg.seed)
        c = cfg.channels
        self.spec = BevGridSpec(cfg.grid_extent, cfg.grid_resolution)
        self.bins = cfg.depth_centers()
        self.rig = build_ring_rig(N_CAMERAS, image_size=tuple(cfg.image_size))
        self.encoder = ImageEncoder(rng, channels=c, depth_bins=cfg.depth_bins,
                                    width1=cfg.enc_width1,
                                    width2=cfg.enc_width2,
                                    kernel2=cfg.enc_kernel2)
        self.fuser = TemporalFuser(rng, channels=c, history=cfg.history)
        self.film = FilmMlp(rng, embed_dim=cfg.embed_dim, channels=c)
        self.gate = FusionGate(c)
        self.sem_head = SemanticHead(rng, channels=c, hidden=cfg.head_hidden)
        self.inst_head = InstanceHead(rng, channels=c, hidden=cfg.head_hidden)
        self.cost_head = CostmapHead(rng, channels=c, hidden=cfg.cost_hidden)
        self.refiner = TrajectoryRefiner(rng, front_dim=c,
                                         hidden=cfg.refiner_hidden,
                                         delta_max=cfg.delta_max)
        h, w = cfg.image_size
        fh, fw = h // ImageEncoder.DOWNSAMPLE, w // ImageEncoder.DOWNSAMPLE
        self.feat_shape = (fh, fw)
        self.frustums = [frustum_points(cam, self.bins, fh, fw)
                         for cam in self.rig]
        self._build_splat_index()
        self.missing_embedding_count = 0

    def _build_splat_index(self):
        """Static scatter targets: frustum geometry never changes per run.

        All frames and cameras splat in one scatter; dropped points route
        to a scratch column past the last frame's cells.  A per-cell gain
        (depth-bin count over static point count) rebalances the huge
        dynamic range between ray-dense near cells and sparse far ones.
        """
        from .geometry import DEFAULT_Z_BAND
        n = self.spec.cells_per_side
        n2 = n * n
        frames = self.cfg.history + 1
        per_cam = []
        for pts in self.frustums:
            xyz = pts.reshape(-1, 3)
            rows, cols = self.spec.cell_of(xyz[:, 0], xyz[:, 1])
            keep = ((rows >= 0) & (rows < n) & (cols >= 0) & (cols < n)
                    & (xyz[:, 2] >= DEFAULT_Z_BAND[0])
                    & (xyz[:, 2] <= DEFAULT_Z_BAND[1]))
            per_cam.append((np.where(keep, rows * n + cols, 0), keep))
        parts = []
        for fi in range(frames):
            for idx, keep in per_cam:
                parts.append(np.where(keep, idx + fi * n2, frames * n2))
        self._splat_index = np.concatenate(parts)
        counts = np.zeros(n2, dtype=np.int64)
        for idx, keep in per_cam:
            counts += np.bincount(idx[keep], minlength=n2)
        self._splat_gain = (self.cfg.depth_bins
                            / np.maximum(counts, 1.0)).reshape(1, n, n)

    # -- parameters ---------------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for block in (self.encoder, self.fuser, self.film, self.gate,
                      self.sem_head, self.inst_head, self.cost_head,
                      self.refiner):
            out.update(block.parameters())
        return out

    def save(self, path):
        nn.save_checkpoint(path, self.parameters())

    def load(self, path):
        nn.restore_parameters(self.parameters(), nn.load_checkpoint(path))

    # -- forward stages -----------------------------------------------------

    def bev_single_frame(self, images: np.ndarray, t: float = 0.0):
        """images (6, 3, H, W) -> (BevGrid, per-camera features Tensor)."""
        imgs = ad.constant(np.asarray(images, dtype=np.float64))
        feats, depth_logits = self.encoder(imgs)
        _guard("geometry-lift/encoder", feats, depth_logits)
        depth = normalize_depth(depth_logits, self.bins)
        lifted = lift_features(feats, depth)      # (6, C, D, fh, fw)
        per_cam = [ad.reshape(ad.narrow(lifted, 0, k, 1), lifted.shape[1:])
                   for k in range(N_CAMERAS)]
        grid, _ = splat_cameras(per_cam, self.frustums, self.spec, t=t)
        _guard("geometry-lift/splat", grid.features)
        return grid, feats

    def fused_bev(self, images_seq, poses: list[EgoPose]):
        """h+1 frames of camera stacks -> (s_t grid, front features of t)."""
        n_frames = self.cfg.history + 1
        if len(images_seq) != n_frames:
            raise ValueError(
                f"need {n_frames} frames, got {len(images_seq)}")
        stacked = ad.constant(np.concatenate(
            [np.asarray(f, dtype=np.float64) for f in images_seq]))
        feats, depth_logits = self.encoder(stacked)
        _guard("geometry-lift/encoder", feats, depth_logits)
        depth = normalize_depth(depth_logits, self.bins)
        flat = ad.lift_flatten(feats, depth.probs)
        c = self.cfg.channels
        n = self.spec.cells_per_side
        n2 = n * n
        scattered = ad.scatter_columns(flat, self._splat_index,
                                       n_frames * n2 + 1)
        gain = ad.constant(self._splat_gain)
        grids = []
        for fi, pose in enumerate(poses):
            cells = ad.reshape(ad.narrow(scattered, 1, fi * n2, n2), (c, n, n))
            grids.append(BevGrid(ad.mul(cells, gain), self.spec, t=pose.t))
        _guard("geometry-lift/splat", grids[-1].features)
        front = ad.narrow(feats, 0, (n_frames - 1) * N_CAMERAS, N_CAMERAS)
        seq = BevSequence(grids, poses)
        s_t = self.fuser(seq)
        _guard("temporal-bev", s_t.features)
        front_feat = ad.reshape(
            ad.mean_(ad.narrow(front, 0, 0, 1), axis=(2, 3)),
            (self.cfg.channels,))
        return s_t, front_feat

    def condition_text(self, s_t: BevGrid,
                       embedding: TextEmbedding | Tensor | None,
                       text_enabled: bool = True):
        """FiLM + gated blend; a missing embedding forces the gate closed."""
        if not text_enabled or embedding is None:
            if text_enabled and embedding is None:
                self.missing_embedding_count += 1
            return s_t, False
        params = self.film(embedding)
        _guard("text-fusion/film", params.gamma, params.beta)
        x_film = modulate(s_t, params)
        fused = weighted_fuse(s_t, x_film, self.gate)
        _guard("text-fusion/fuse", fused.features)
        return fused, True

    def forward(self, images_seq, poses, embedding,
                text_enabled: bool | None = None) -> PipelineOutputs:
        if text_enabled is None:
            text_enabled = self.cfg.text_enabled
        s_t, front_feat = self.fused_bev(images_seq, poses)
        fused, used = self.condition_text(s_t, embedding, text_enabled)
        sem = self.sem_head(fused)
        _guard("perception-heads/semantic", sem.logits)
        inst = self.inst_head(fused, raw_heat=True)
        _guard("perception-heads/instance", inst.heatmap, inst.offsets,
               inst.flow)
        costmap = self.cost_head(fused)
        _guard("planner/costmap", costmap.tensor())
        return PipelineOutputs(bev=s_t, fused=fused, semantic=sem,
                               instance=inst, costmap=costmap,
                               front_feature=front_feat, text_used=used)


def embedding_for_captions(cfg: RunConfig, captions: list[str], frame_id: str,
                           table: EmbeddingTable | None) -> TextEmbedding | None:
    """Resolve the frame's embedding from captions or a loaded BTXE table."""
    if cfg.embedding_source == "file":
        if table is None:
            return None
        return table.get(frame_id)
    if not captions:
        return None
    if cfg.text_view == "all":
        text = "; ".join(captions)
    else:
        text = captions[0]
    return stub_embed(text, dim=cfg.embed_dim, frame_id=frame_id)
