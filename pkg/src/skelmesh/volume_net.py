"""Stage two: skeletal-volume refinement.

A global 3D U-Net refines the coarse skeleton voxelization with an
image-guided correction channel; a local U-Net refines overlapped sub-volumes
of the high-resolution voxelization, each concatenated with its aligned crop
of the refined global volume (structural regularization). Supervision is
binary cross-entropy against solid ground-truth occupancy.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import tensor_ad as ta
from .skeleton_net import SilhouetteImage, SkeletonPrediction
from .tensor_ad import NumericalAbort, Tensor
from .voxel import (SubVolume, VoxelGrid, dilate, partition, save_voxb,
                    stitch, upsample_replicate, voxelize)

NORM_BBOX_MIN = np.array([-1.0, -1.0, -1.0])
NORM_BBOX_MAX = np.array([1.0, 1.0, 1.0])


@dataclass
class VolumeStageConfig:
    global_res: int = 32
    local_res: int = 64
    crop: int = 32
    stride: int = 16
    guidance_res: int = 16
    iso: float = 0.5
    dilate_radius: int = 1
    unet_widths: tuple = (8, 16, 32)
    image_size: int = 64
    corrector_latent: int = 128
    corrector_channels: tuple = (8, 16, 32, 64)
    use_image_correction: bool = True
    use_guidance: bool = True
    # training schedule (desk-scale defaults; the paper's three phases)
    phase1_epochs: int = 30
    phase1_lr: float = 1e-4
    phase1_lr_drop_epoch: int = 21
    phase1_lr_drop: float = 1e-5
    phase2_epochs: int = 10
    phase2_lr: float = 1e-5
    phase3_epochs: int = 5
    phase3_lr: float = 1e-5
    crops_per_sample: int = 2

    def __post_init__(self):
        if self.guidance_res * self.local_res != self.crop * self.global_res:
            raise ValueError("need guidance_res = crop * global_res / local_res, got "
                             f"{self.guidance_res} != {self.crop}*{self.global_res}"
                             f"/{self.local_res}")
        if self.local_res % self.global_res:
            raise ValueError("local_res must be a multiple of global_res")
        if self.crop > self.local_res or not (1 <= self.stride <= self.crop):
            raise ValueError("invalid crop/stride for local_res")


@dataclass
class VolumeTrainSample:
    """One training item: silhouette, input skeleton points, GT occupancy."""

    image: SilhouetteImage
    skeleton_points: np.ndarray
    occ_global: VoxelGrid
    occ_local: VoxelGrid


# ---------------------------------------------------------------------------
# weight construction


def init_volume_weights(cfg: VolumeStageConfig, seed: int) -> dict:
    rng = np.random.default_rng(seed)
    w = {}
    _init_unet(w, "global", in_ch=2, widths=cfg.unet_widths, rng=rng)
    _init_unet(w, "local", in_ch=2, widths=cfg.unet_widths, rng=rng)
    _init_corrector(w, "corr", cfg, rng)
    return w


def _conv_init(rng, co, ci):
    return ta.glorot(rng, (co, ci, 3, 3, 3), ci * 27, co)


def _init_unet(w, prefix, in_ch, widths, rng):
    w0, w1, w2 = widths
    w[f"{prefix}.in"] = _conv_init(rng, w0, in_ch)
    w[f"{prefix}.down1"] = _conv_init(rng, w1, w0)
    w[f"{prefix}.down2"] = _conv_init(rng, w2, w1)
    w[f"{prefix}.down3"] = _conv_init(rng, w2, w2)
    w[f"{prefix}.up3"] = _conv_init(rng, w2, w2)      # transpose: w2 -> w2
    w[f"{prefix}.fuse3"] = _conv_init(rng, w2, 2 * w2)
    w[f"{prefix}.up2"] = _conv_init(rng, w2, w1)      # transpose maps w2 -> w1
    w[f"{prefix}.fuse2"] = _conv_init(rng, w1, 2 * w1)
    w[f"{prefix}.up1"] = _conv_init(rng, w1, w0)
    w[f"{prefix}.fuse1"] = _conv_init(rng, w0, 2 * w0)
    w[f"{prefix}.head"] = _conv_init(rng, 1, w0)


def _init_corrector(w, prefix, cfg, rng):
    chans = (1,) + tuple(cfg.corrector_channels)
    for i in range(len(chans) - 1):
        w[f"{prefix}.enc{i}"] = _conv_init(rng, chans[i + 1], chans[i])
    side = cfg.image_size // 2 ** (len(chans) - 1)
    flat = cfg.corrector_channels[-1] * side * side
    lat = cfg.corrector_latent
    w[f"{prefix}.fc0.w"] = ta.glorot(rng, (flat, lat), flat, lat)
    w[f"{prefix}.fc0.b"] = ta.zeros(lat)
    seed_ch = cfg.unet_widths[-1]
    w[f"{prefix}.fc1.w"] = ta.glorot(rng, (lat, seed_ch * 8), lat, seed_ch * 8)
    w[f"{prefix}.fc1.b"] = ta.zeros(seed_ch * 8)
    n_up = int(np.log2(cfg.guidance_res // 2))
    ch = seed_ch
    for i in range(n_up):
        co = max(ch // 2, 4) if i < n_up - 1 else 1
        w[f"{prefix}.dec{i}"] = _conv_init(rng, ch, co)  # transpose layout (c_in, c_out)
        ch = co


def volume_parameters(weights: dict) -> list[Tensor]:
    return [weights[k] for k in sorted(weights)]


# ---------------------------------------------------------------------------
# forward passes (tensor level)


def _unet_forward(x: Tensor, weights: dict, prefix: str) -> Tensor:
    e0 = ta.relu(ta.conv3d(x, weights[f"{prefix}.in"], 1, 1))
    e1 = ta.relu(ta.conv3d(e0, weights[f"{prefix}.down1"], 2, 1))
    e2 = ta.relu(ta.conv3d(e1, weights[f"{prefix}.down2"], 2, 1))
    e3 = ta.relu(ta.conv3d(e2, weights[f"{prefix}.down3"], 2, 1))
    u3 = ta.relu(ta.conv3d_transpose(e3, weights[f"{prefix}.up3"], 2, 1,
                                     out_dims=e2.shape[1:]))
    u3 = ta.relu(ta.conv3d(ta.concat([u3, e2], axis=0), weights[f"{prefix}.fuse3"], 1, 1))
    u2 = ta.relu(ta.conv3d_transpose(u3, weights[f"{prefix}.up2"], 2, 1,
                                     out_dims=e1.shape[1:]))
    u2 = ta.relu(ta.conv3d(ta.concat([u2, e1], axis=0), weights[f"{prefix}.fuse2"], 1, 1))
    u1 = ta.relu(ta.conv3d_transpose(u2, weights[f"{prefix}.up1"], 2, 1,
                                     out_dims=e0.shape[1:]))
    u1 = ta.relu(ta.conv3d(ta.concat([u1, e0], axis=0), weights[f"{prefix}.fuse1"], 1, 1))
    return ta.sigmoid(ta.conv3d(u1, weights[f"{prefix}.head"], 1, 1))


def _corrector_forward(pixels: np.ndarray, weights: dict, cfg: VolumeStageConfig) -> Tensor:
    h = Tensor(pixels[None, None, :, :])
    for i in range(len(cfg.corrector_channels)):
        h = ta.relu(ta.conv3d(h, weights[f"corr.enc{i}"], 2, 1))
    h = ta.reshape(h, (1, h.size))
    h = ta.relu(ta.linear(h, weights["corr.fc0.w"], weights["corr.fc0.b"]))
    h = ta.relu(ta.linear(h, weights["corr.fc1.w"], weights["corr.fc1.b"]))
    ch = cfg.unet_widths[-1]
    h = ta.reshape(h, (ch, 2, 2, 2))
    n_up = int(np.log2(cfg.guidance_res // 2))
    side = 2
    for i in range(n_up):
        side *= 2
        h = ta.conv3d_transpose(h, weights[f"corr.dec{i}"], 2, 1,
                                out_dims=(side, side, side))
        if i < n_up - 1:
            h = ta.relu(h)
    return ta.sigmoid(h)


def _global_forward(v_coarse: Tensor, img_vol: Tensor, weights: dict) -> Tensor:
    return _unet_forward(ta.concat([v_coarse, img_vol], axis=0), weights, "global")


def _local_forward(sub: Tensor, guidance: Tensor, weights: dict) -> Tensor:
    return _unet_forward(ta.concat([sub, guidance], axis=0), weights, "local")


# ---------------------------------------------------------------------------
# public grid-level operations


def image_to_volume(image: SilhouetteImage, weights: dict,
                    cfg: VolumeStageConfig) -> VoxelGrid:
    """Map the silhouette to a coarse (guidance-resolution) occupancy volume
    with values in (0,1)."""
    if image.pixels.shape != (cfg.image_size, cfg.image_size):
        raise ValueError(f"image is {image.pixels.shape}, config wants "
                         f"({cfg.image_size}, {cfg.image_size})")
    out = _corrector_forward(image.pixels, weights, cfg)
    return VoxelGrid(out.data[0], NORM_BBOX_MIN, NORM_BBOX_MAX)


def refine_global(v_coarse: VoxelGrid, img_vol: VoxelGrid, weights: dict,
                  cfg: VolumeStageConfig) -> VoxelGrid:
    """U-Net refinement of the coarse skeletal volume, image volume as the
    second input channel (replication-upsampled to global resolution)."""
    if v_coarse.dims != (cfg.global_res,) * 3:
        raise ValueError(f"v_coarse dims {v_coarse.dims} != global_res {cfg.global_res}")
    factor = cfg.global_res // img_vol.dims[0]
    if img_vol.dims[0] * factor != cfg.global_res:
        raise ValueError(f"image volume dims {img_vol.dims} do not divide global_res")
    img_up = upsample_replicate(img_vol, factor) if factor > 1 else img_vol
    out = _global_forward(Tensor(v_coarse.values[None]), Tensor(img_up.values[None]),
                          weights)
    return VoxelGrid(out.data[0], v_coarse.bbox_min, v_coarse.bbox_max)


def refine_local(sub: SubVolume, guidance: VoxelGrid, weights: dict,
                 cfg: VolumeStageConfig) -> SubVolume:
    """Refine one sub-volume under its aligned global-guidance crop
    (replication-upsampled to crop resolution before concatenation)."""
    if sub.grid.dims != (cfg.crop,) * 3:
        raise ValueError(f"sub-volume dims {sub.grid.dims} != crop {cfg.crop}")
    if guidance.dims != (cfg.guidance_res,) * 3:
        raise ValueError(f"guidance dims {guidance.dims} != guidance_res {cfg.guidance_res}")
    if not (np.allclose(guidance.bbox_min, sub.grid.bbox_min) and
            np.allclose(guidance.bbox_max, sub.grid.bbox_max)):
        raise ValueError("guidance footprint does not match sub-volume footprint")
    guid_up = upsample_replicate(guidance, cfg.crop // cfg.guidance_res)
    out = _local_forward(Tensor(sub.grid.values[None]), Tensor(guid_up.values[None]),
                         weights)
    return SubVolume(VoxelGrid(out.data[0], sub.grid.bbox_min, sub.grid.bbox_max),
                     sub.origin)


def skeleton_to_grids(points: np.ndarray, cfg: VolumeStageConfig):
    """Voxelize skeleton points at both resolutions and coarsen by dilation."""
    v_low = dilate(voxelize(points, (cfg.global_res,) * 3, NORM_BBOX_MIN, NORM_BBOX_MAX),
                   cfg.dilate_radius)
    v_high = dilate(voxelize(points, (cfg.local_res,) * 3, NORM_BBOX_MIN, NORM_BBOX_MAX),
                    cfg.dilate_radius)
    return v_low, v_high


def guidance_crop(v_global: VoxelGrid, origin, cfg: VolumeStageConfig) -> VoxelGrid:
    """Crop of the global volume whose world footprint equals the local crop's."""
    scale = cfg.global_res / cfg.local_res
    g_origin = [int(o * scale) for o in origin]
    for o, go in zip(origin, g_origin):
        if go * cfg.local_res != o * cfg.global_res:
            raise ValueError(f"sub-volume origin {origin} not alignable to global grid")
    gr = cfg.guidance_res
    cs = v_global.cell_size()
    lo = v_global.bbox_min + np.array(g_origin) * cs
    hi = lo + gr * cs
    vals = v_global.values[g_origin[0]:g_origin[0] + gr,
                           g_origin[1]:g_origin[1] + gr,
                           g_origin[2]:g_origin[2] + gr].copy()
    return VoxelGrid(vals, lo, hi)


def synthesize_volume(skeleton, image: SilhouetteImage, weights: dict,
                      cfg: VolumeStageConfig, bypass: bool = False,
                      dump_dir=None) -> VoxelGrid:
    """Full stage-two pipeline: skeleton -> dilated voxelizations at both
    resolutions -> image-corrected global refinement -> per-crop local
    refinement under global guidance -> mean-stitched volume at local_res.

    bypass=True skips all networks (pass-through), reproducing the dilated
    high-resolution voxelization exactly; used for plumbing checks.
    """
    pts = skeleton.all_points() if isinstance(skeleton, SkeletonPrediction) \
        else np.asarray(skeleton if not hasattr(skeleton, "points") else skeleton.points)
    v_low, v_high = skeleton_to_grids(pts, cfg)
    if dump_dir is not None:
        save_voxb(f"{dump_dir}/stage2_vk_low.voxb", v_low)
        save_voxb(f"{dump_dir}/stage2_vk_high.voxb", v_high)
    parts = partition(v_high, cfg.crop, cfg.stride)
    if bypass:
        refined = parts
    else:
        if cfg.use_image_correction:
            img_vol = image_to_volume(image, weights, cfg)
        else:
            img_vol = VoxelGrid(np.zeros((cfg.guidance_res,) * 3),
                                NORM_BBOX_MIN, NORM_BBOX_MAX)
        v_global = refine_global(v_low, img_vol, weights, cfg)
        if dump_dir is not None:
            save_voxb(f"{dump_dir}/stage2_img_vol.voxb", img_vol)
            save_voxb(f"{dump_dir}/stage2_v_global.voxb", v_global)
        refined = []
        for part in parts:
            if cfg.use_guidance:
                guid = guidance_crop(v_global, part.origin, cfg)
            else:
                guid = VoxelGrid(np.zeros((cfg.guidance_res,) * 3),
                                 part.grid.bbox_min, part.grid.bbox_max)
            refined.append(refine_local(part, guid, weights, cfg))
    out = stitch(refined, v_high.dims, v_high.bbox_min, v_high.bbox_max)
    if dump_dir is not None:
        save_voxb(f"{dump_dir}/stage2_v_refined.voxb", out)
    return out


# ---------------------------------------------------------------------------
# skeleton degradation (training-input corruption mimicking stage-one errors)


def degrade_skeleton(points: np.ndarray, rng: np.random.Generator,
                     drop_balls: int = 2, ball_radius: float = 0.25,
                     jitter: float = 0.02, spurious_clusters: int = 2,
                     cluster_size: int = 12) -> np.ndarray:
    """Structured corruption: drop ball-shaped regions, jitter survivors, add
    spurious clusters. Keeps at least a quarter of the points."""
    pts = np.asarray(points, dtype=np.float64)
    keep = np.ones(len(pts), dtype=bool)
    for _ in range(int(rng.integers(0, drop_balls + 1))):
        center = pts[rng.integers(len(pts))]
        r = ball_radius * (0.5 + rng.random())
        drop = np.linalg.norm(pts - center, axis=1) < r
        if (keep & ~drop).sum() >= len(pts) // 4:
            keep &= ~drop
    out = pts[keep] + rng.normal(0, jitter, (keep.sum(), 3))
    blobs = []
    for _ in range(int(rng.integers(0, spurious_clusters + 1))):
        center = rng.uniform(-0.8, 0.8, 3)
        blobs.append(center + rng.normal(0, 0.05, (cluster_size, 3)))
    if blobs:
        out = np.vstack([out] + blobs)
    return np.clip(out, -0.999, 0.999)


# ---------------------------------------------------------------------------
# training


@dataclass
class VolumeTrainLog:
    rows: list = field(default_factory=list)  # (phase, epoch, loss, iou)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["phase", "epoch", "loss", "val_iou"])
            for r in self.rows:
                wr.writerow([r[0], r[1], f"{r[2]:.9e}", f"{r[3]:.9e}"])


def _global_step_loss(sample: VolumeTrainSample, weights, cfg) -> Tensor:
    v_low, _ = skeleton_to_grids(sample.skeleton_points, cfg)
    if cfg.use_image_correction:
        img_t = _corrector_forward(sample.image.pixels, weights, cfg)
        img_t = ta.upsample_repeat(img_t, cfg.global_res // cfg.guidance_res)
    else:
        img_t = Tensor(np.zeros((1, cfg.global_res, cfg.global_res, cfg.global_res)))
    pred = _global_forward(Tensor(v_low.values[None]), img_t, weights)
    return ta.bce(pred, sample.occ_global.values[None])


def _local_step_loss(sample: VolumeTrainSample, weights, cfg, origins,
                     v_global_grid: VoxelGrid, joint: bool) -> Tensor:
    """BCE over chosen local crops; when joint, guidance gradients flow back
    into the global network and corrector."""
    _, v_high = skeleton_to_grids(sample.skeleton_points, cfg)
    terms = []
    if joint:
        if cfg.use_image_correction:
            img_t = _corrector_forward(sample.image.pixels, weights, cfg)
            img_t = ta.upsample_repeat(img_t, cfg.global_res // cfg.guidance_res)
        else:
            img_t = Tensor(np.zeros((1, cfg.global_res, cfg.global_res, cfg.global_res)))
        v_low, _ = skeleton_to_grids(sample.skeleton_points, cfg)
        v_global_t = _global_forward(Tensor(v_low.values[None]), img_t, weights)
        terms.append(ta.bce(v_global_t, sample.occ_global.values[None]))
    for origin in origins:
        ox, oy, oz = origin
        sub_vals = v_high.values[ox:ox + cfg.crop, oy:oy + cfg.crop, oz:oz + cfg.crop]
        gt_vals = sample.occ_local.values[ox:ox + cfg.crop, oy:oy + cfg.crop,
                                          oz:oz + cfg.crop]
        if cfg.use_guidance:
            g_o = [o * cfg.global_res // cfg.local_res for o in origin]
            if joint:
                guid_t = ta.crop3d(v_global_t, (0, *g_o), (1, *(cfg.guidance_res,) * 3))
            else:
                gvals = v_global_grid.values[g_o[0]:g_o[0] + cfg.guidance_res,
                                             g_o[1]:g_o[1] + cfg.guidance_res,
                                             g_o[2]:g_o[2] + cfg.guidance_res]
                guid_t = Tensor(gvals[None])
            guid_t = ta.upsample_repeat(guid_t, cfg.crop // cfg.guidance_res)
        else:
            guid_t = Tensor(np.zeros((1, cfg.crop, cfg.crop, cfg.crop)))
        pred = _local_forward(Tensor(sub_vals[None]), guid_t, weights)
        terms.append(ta.bce(pred, gt_vals[None]))
    return ta.scale(ta.add_n(terms), 1.0 / len(terms))


def _mean_val_iou(samples, weights, cfg) -> float:
    from .voxel import iou
    vals = []
    for s in samples:
        v = synthesize_volume(s.skeleton_points, s.image, weights, cfg)
        vals.append(iou(v, s.occ_local, cfg.iso))
    return float(np.mean(vals)) if vals else float("nan")


def train_volume(train_set: list[VolumeTrainSample], val_set: list[VolumeTrainSample],
                 cfg: VolumeStageConfig, seed: int, progress=None):
    """Three-phase schedule: global alone, then local under frozen global
    guidance, then joint fine-tune. Returns (weights, VolumeTrainLog)."""
    if not train_set:
        raise ValueError("empty training set")
    weights = init_volume_weights(cfg, seed)
    params = volume_parameters(weights)
    rng = np.random.default_rng(seed + 1)
    log = VolumeTrainLog()

    def run_phase(phase, epochs, lr, loss_fn, lr_drop_epoch=None, lr_drop=None):
        state = ta.AdamState(params, lr=lr)
        for epoch in range(epochs):
            if lr_drop_epoch is not None and epoch >= lr_drop_epoch:
                state.lr = lr_drop
            order = rng.permutation(len(train_set))
            total = 0.0
            for i in order:
                with ta.Tape() as tape:
                    loss = loss_fn(train_set[i])
                    if not np.isfinite(loss.item()):
                        raise NumericalAbort(f"volume training diverged in {phase} "
                                             f"epoch {epoch}")
                    tape.backward(loss)
                ta.adam_step(params, [p.grad for p in params], state)
                ta.zero_grads(params)
                total += loss.item()
            val_iou = _mean_val_iou(val_set, weights, cfg) if val_set else float("nan")
            log.rows.append((phase, epoch, total / len(train_set), val_iou))
            if progress is not None:
                progress(phase, epoch, log)

    run_phase("global", cfg.phase1_epochs, cfg.phase1_lr,
              lambda s: _global_step_loss(s, weights, cfg),
              cfg.phase1_lr_drop_epoch, cfg.phase1_lr_drop)

    offsets = _crop_origins(cfg)

    def local_loss(s, joint):
        v_low, _ = skeleton_to_grids(s.skeleton_points, cfg)
        if cfg.use_guidance and not joint:
            img_vol = (image_to_volume(s.image, weights, cfg) if cfg.use_image_correction
                       else VoxelGrid(np.zeros((cfg.guidance_res,) * 3),
                                      NORM_BBOX_MIN, NORM_BBOX_MAX))
            v_global_grid = refine_global(v_low, img_vol, weights, cfg)
        else:
            v_global_grid = None
        chosen = [offsets[j] for j in
                  rng.choice(len(offsets), size=min(cfg.crops_per_sample, len(offsets)),
                             replace=False)]
        return _local_step_loss(s, weights, cfg, chosen, v_global_grid, joint)

    run_phase("local", cfg.phase2_epochs, cfg.phase2_lr, lambda s: local_loss(s, False))
    run_phase("joint", cfg.phase3_epochs, cfg.phase3_lr, lambda s: local_loss(s, True))
    return weights, log


def _crop_origins(cfg: VolumeStageConfig):
    from .voxel import _axis_offsets
    offs = _axis_offsets(cfg.local_res, cfg.crop, cfg.stride)
    return [(a, b, c) for a in offs for b in offs for c in offs]
