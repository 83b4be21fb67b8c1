"""Stage one: silhouette encoder plus parallel curve/surface primitive
decoders that deform line and square primitives into labeled skeleton points.

The decoder follows the AtlasNet recipe: each primitive owns a 4-layer MLP
(ReLU on the first three layers, tanh head) fed the image latent concatenated
with the primitive's parameter coordinates. Curve primitives sample the unit
line at T points, surface primitives a GxG lattice of the unit square.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor_ad as ta
from .geom_core import CURVE, SURFACE, LabeledPointCloud, NeighborGraph, chamfer
from .tensor_ad import NumericalAbort, Tensor

VARIANTS = ("two_stream", "single_mlp", "lines_only", "squares_only",
            "point_regression", "two_stream_no_lap")


@dataclass(frozen=True)
class Camera:
    """Orthographic view transform: world -> view is a pure rotation, view
    x/y map linearly onto image columns/rows with half-frame extent `scale`."""

    rotation: np.ndarray  # (3,3)
    scale: float = 1.6

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-8):
            raise ValueError("camera rotation must be orthonormal")
        object.__setattr__(self, "rotation", R)

    def view(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T

    def project(self, points: np.ndarray, width: int, height: int) -> np.ndarray:
        """World points -> continuous (u=col, v=row) pixel-center coordinates."""
        q = self.view(points)
        u = (q[:, 0] / self.scale + 1.0) / 2.0 * width - 0.5
        v = (q[:, 1] / self.scale + 1.0) / 2.0 * height - 0.5
        return np.stack([u, v], axis=1)


@dataclass(frozen=True)
class SilhouetteImage:
    """Single-channel rendered view in [0,1] plus its camera transform."""

    pixels: np.ndarray  # (height, width)
    camera: Camera

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2:
            raise ValueError("pixels must be a (height, width) array")
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class PrimitiveBank:
    """Uniformly sampled 1D line and 2D square primitives."""

    n_lines: int = 20
    n_squares: int = 20
    samples_per_line: int = 16   # T
    grid_per_square: int = 5     # G, G*G samples per square

    def line_params(self) -> np.ndarray:
        t = self.samples_per_line
        return np.arange(t, dtype=np.float64) / (t - 1)

    def square_params(self) -> np.ndarray:
        g = self.grid_per_square
        u, v = np.meshgrid(np.arange(g), np.arange(g), indexing="ij")
        return np.stack([u.ravel(), v.ravel()], axis=1) / (g - 1)

    @property
    def n_curve_points(self) -> int:
        return self.n_lines * self.samples_per_line

    @property
    def n_surface_points(self) -> int:
        return self.n_squares * self.grid_per_square ** 2


@dataclass
class SkeletonConfig:
    image_size: int = 64
    latent_dim: int = 256
    bank: PrimitiveBank = field(default_factory=PrimitiveBank)
    mlp_widths: tuple = (256, 128, 64)
    encoder_channels: tuple = (8, 16, 32, 64)
    variant: str = "two_stream"
    lambda_lap: float = 0.1
    batch_size: int = 32
    lr: float = 1e-3
    lr_drop: float = 3e-4
    lr_drop_epoch: int = 80
    epochs: int = 120

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; one of {VARIANTS}")

    @property
    def lambda_lap_effective(self) -> float:
        return 0.0 if self.variant in ("two_stream_no_lap", "point_regression") \
            else self.lambda_lap

    @property
    def uses_lines(self) -> bool:
        return self.variant in ("two_stream", "single_mlp", "lines_only", "two_stream_no_lap")

    @property
    def uses_squares(self) -> bool:
        return self.variant in ("two_stream", "single_mlp", "squares_only", "two_stream_no_lap")

    @property
    def label_split(self) -> bool:
        return self.variant in ("two_stream", "two_stream_no_lap")

    def output_point_count(self) -> int:
        if self.variant == "point_regression":
            return self.bank.n_curve_points + self.bank.n_surface_points
        n = 0
        if self.uses_lines:
            n += self.bank.n_curve_points
        if self.uses_squares:
            n += self.bank.n_surface_points
        return n


@dataclass
class SkeletonPrediction:
    """Decoded skeleton points with full generating provenance."""

    curve_points: np.ndarray      # (n_lines*T, 3)
    surface_points: np.ndarray    # (n_squares*G^2, 3)
    curve_provenance: np.ndarray  # (n, 2): line index, t
    surface_provenance: np.ndarray  # (m, 3): square index, u, v

    def all_points(self) -> np.ndarray:
        return np.vstack([self.curve_points, self.surface_points])

    def to_cloud(self) -> LabeledPointCloud:
        labels = np.concatenate([
            np.full(len(self.curve_points), CURVE, dtype=np.uint8),
            np.full(len(self.surface_points), SURFACE, dtype=np.uint8),
        ])
        return LabeledPointCloud(self.all_points(), labels)


# ---------------------------------------------------------------------------
# weights


def init_skeleton_weights(cfg: SkeletonConfig, seed: int) -> dict:
    rng = np.random.default_rng(seed)
    w = {}
    _init_encoder(w, "enc", cfg, rng)
    widths = cfg.mlp_widths
    if cfg.variant == "point_regression":
        n_out = cfg.output_point_count()
        dims = [cfg.latent_dim, widths[0], widths[0], 3 * n_out]
        for li in range(len(dims) - 1):
            w[f"pr.l{li}.w"] = ta.glorot(rng, (dims[li], dims[li + 1]), dims[li], dims[li + 1])
            w[f"pr.l{li}.b"] = ta.zeros(dims[li + 1])
        return w
    if cfg.uses_lines:
        for i in range(cfg.bank.n_lines):
            _init_mlp(w, f"cur.{i}", cfg.latent_dim + 1, widths, rng)
    if cfg.uses_squares:
        for i in range(cfg.bank.n_squares):
            _init_mlp(w, f"sur.{i}", cfg.latent_dim + 2, widths, rng)
    return w


def _init_encoder(w, prefix, cfg, rng):
    chans = (1,) + tuple(cfg.encoder_channels)
    for i in range(len(chans) - 1):
        ci, co = chans[i], chans[i + 1]
        w[f"{prefix}.conv{i}"] = ta.glorot(rng, (co, ci, 3, 3, 3), ci * 27, co)
    side = cfg.image_size // 2 ** (len(chans) - 1)
    flat = cfg.encoder_channels[-1] * side * side
    w[f"{prefix}.head.w"] = ta.glorot(rng, (flat, cfg.latent_dim), flat, cfg.latent_dim)
    w[f"{prefix}.head.b"] = ta.zeros(cfg.latent_dim)


def _init_mlp(w, prefix, in_dim, widths, rng):
    dims = [in_dim, *widths, 3]
    for li in range(len(dims) - 1):
        w[f"{prefix}.l{li}.w"] = ta.glorot(rng, (dims[li], dims[li + 1]), dims[li], dims[li + 1])
        w[f"{prefix}.l{li}.b"] = ta.zeros(dims[li + 1])


def skeleton_parameters(weights: dict) -> list[Tensor]:
    return [weights[k] for k in sorted(weights)]


# ---------------------------------------------------------------------------
# forward passes


def encode(image, weights: dict, cfg: SkeletonConfig) -> Tensor:
    """Silhouette -> (1, latent) row. Accepts a SilhouetteImage or a raw
    (H, W) pixel array."""
    px = image.pixels if isinstance(image, SilhouetteImage) else np.asarray(image, float)
    if px.shape != (cfg.image_size, cfg.image_size):
        raise ValueError(f"image is {px.shape}, config wants "
                         f"({cfg.image_size}, {cfg.image_size})")
    h = Tensor(px[None, None, :, :])  # (c=1, D=1, H, W)
    for i in range(len(cfg.encoder_channels)):
        h = ta.relu(ta.conv3d(h, weights[f"enc.conv{i}"], stride=2, pad=1))
    flat = ta.reshape(h, (1, h.size))
    return ta.linear(flat, weights["enc.head.w"], weights["enc.head.b"])


def _mlp_forward(rows: Tensor, weights: dict, prefix: str, n_layers: int) -> Tensor:
    h = rows
    for li in range(n_layers - 1):
        h = ta.relu(ta.linear(h, weights[f"{prefix}.l{li}.w"], weights[f"{prefix}.l{li}.b"]))
    return ta.tanh(ta.linear(h, weights[f"{prefix}.l{n_layers - 1}.w"],
                             weights[f"{prefix}.l{n_layers - 1}.b"]))


def _decode_stream(latents: list[Tensor], bank_params: np.ndarray, weights: dict,
                   stream: str, n_primitives: int, n_layers: int) -> list[Tensor]:
    """Decode every primitive of one stream for a batch of latents.

    Returns one (B*S, 3) tensor per primitive, rows sample-major so sample
    b occupies rows [b*S, (b+1)*S).
    """
    s = len(bank_params)
    params = bank_params.reshape(s, -1)
    outs = []
    rows_per_sample = []
    for lat in latents:
        tiled = ta.tile_rows(lat, s)
        rows_per_sample.append(ta.concat([tiled, Tensor(params)], axis=1))
    all_rows = ta.concat(rows_per_sample, axis=0) if len(rows_per_sample) > 1 \
        else rows_per_sample[0]
    for p in range(n_primitives):
        outs.append(_mlp_forward(all_rows, weights, f"{stream}.{p}", n_layers))
    return outs


def decode_curves(latent: Tensor, bank: PrimitiveBank, weights: dict,
                  n_layers: int = 4) -> Tensor:
    """(n_lines*T, 3) points for one latent, line-major."""
    outs = _decode_stream([latent], bank.line_params(), weights, "cur",
                          bank.n_lines, n_layers)
    return ta.concat(outs, axis=0)


def decode_surfaces(latent: Tensor, bank: PrimitiveBank, weights: dict,
                    n_layers: int = 4) -> Tensor:
    """(n_squares*G^2, 3) points for one latent, square-major."""
    outs = _decode_stream([latent], bank.square_params(), weights, "sur",
                          bank.n_squares, n_layers)
    return ta.concat(outs, axis=0)


def _decode_point_regression(latent: Tensor, weights: dict, n_points: int) -> Tensor:
    h = ta.relu(ta.linear(latent, weights["pr.l0.w"], weights["pr.l0.b"]))
    h = ta.relu(ta.linear(h, weights["pr.l1.w"], weights["pr.l1.b"]))
    h = ta.tanh(ta.linear(h, weights["pr.l2.w"], weights["pr.l2.b"]))
    return ta.reshape(h, (n_points, 3))


# ---------------------------------------------------------------------------
# parameter-space neighbor graphs (Eq.-style smoothness over predictions)


def line_graph(n_samples: int, batch: int = 1) -> NeighborGraph:
    """Chain adjacency along t, replicated per batch block."""
    edges = []
    for b in range(batch):
        o = b * n_samples
        edges += [(o + i, o + i + 1) for i in range(n_samples - 1)]
    return NeighborGraph.from_edges(batch * n_samples, edges)


def square_graph(g: int, batch: int = 1) -> NeighborGraph:
    """4-neighborhood on the GxG lattice, replicated per batch block."""
    edges = []
    for b in range(batch):
        o = b * g * g
        for i in range(g):
            for j in range(g):
                if i + 1 < g:
                    edges.append((o + i * g + j, o + (i + 1) * g + j))
                if j + 1 < g:
                    edges.append((o + i * g + j, o + i * g + j + 1))
    return NeighborGraph.from_edges(batch * g * g, edges)


# ---------------------------------------------------------------------------
# loss


def skeleton_loss(curve_pred: Tensor | None, surface_pred: Tensor | None,
                  gt: LabeledPointCloud, lambda_lap: float, label_split: bool,
                  bank: PrimitiveBank,
                  graphs: tuple[NeighborGraph, NeighborGraph] | None = None) -> Tensor:
    """Two-stream training objective for a single sample.

    CD (sum form) of each stream against its labeled ground-truth subset
    (or of the union against the whole cloud when label_split is off), plus
    lambda_lap times the Laplacian smoothness of each stream over its
    parameter-space neighbor graph. A stream whose ground-truth label subset
    is empty contributes only its Laplacian term.
    """
    if curve_pred is None and surface_pred is None:
        raise ValueError("skeleton_loss needs at least one stream prediction")
    if graphs is None:
        graphs = (line_graph(bank.samples_per_line, bank.n_lines)
                  if curve_pred is not None else None,
                  square_graph(bank.grid_per_square, bank.n_squares)
                  if surface_pred is not None else None)
    terms = []
    if label_split:
        gt_curve = gt.curve_points
        gt_surface = gt.surface_points
        if curve_pred is not None and len(gt_curve):
            terms.append(ta.chamfer_loss(curve_pred, gt_curve))
        if surface_pred is not None and len(gt_surface):
            terms.append(ta.chamfer_loss(surface_pred, gt_surface))
    else:
        union = gt.points
        preds = [p for p in (curve_pred, surface_pred) if p is not None]
        joint = preds[0] if len(preds) == 1 else ta.concat(preds, axis=0)
        terms.append(ta.chamfer_loss(joint, union))
    if lambda_lap > 0:
        if curve_pred is not None:
            terms.append(ta.scale(ta.laplacian_smoothness(curve_pred, graphs[0]), lambda_lap))
        if surface_pred is not None:
            terms.append(ta.scale(ta.laplacian_smoothness(surface_pred, graphs[1]), lambda_lap))
    return ta.add_n(terms)


# ---------------------------------------------------------------------------
# inference


def infer_skeleton(image, weights: dict, cfg: SkeletonConfig) -> SkeletonPrediction:
    """Deterministic skeleton prediction with per-point provenance."""
    if not weights:
        raise ValueError("infer_skeleton: missing weights")
    bank = cfg.bank
    latent = encode(image, weights, cfg)
    t_vals = bank.line_params()
    uv = bank.square_params()
    if cfg.variant == "point_regression":
        pts = _decode_point_regression(latent, weights, cfg.output_point_count()).data
        nc = bank.n_curve_points
        curve, surface = pts[:nc], pts[nc:]
        cur_prov = np.column_stack([np.repeat(np.arange(bank.n_lines), len(t_vals)),
                                    np.tile(t_vals, bank.n_lines)])
        sur_prov = np.column_stack([np.repeat(np.arange(bank.n_squares), len(uv)),
                                    np.tile(uv, (bank.n_squares, 1))])
        return SkeletonPrediction(curve, surface, cur_prov, sur_prov)
    if cfg.uses_lines:
        curve = decode_curves(latent, bank, weights).data
        cur_prov = np.column_stack([np.repeat(np.arange(bank.n_lines), len(t_vals)),
                                    np.tile(t_vals, bank.n_lines)])
    else:
        curve = np.zeros((0, 3))
        cur_prov = np.zeros((0, 2))
    if cfg.uses_squares:
        surface = decode_surfaces(latent, bank, weights).data
        sur_prov = np.column_stack([np.repeat(np.arange(bank.n_squares), len(uv)),
                                    np.tile(uv, (bank.n_squares, 1))])
    else:
        surface = np.zeros((0, 3))
        sur_prov = np.zeros((0, 3))
    return SkeletonPrediction(curve, surface, cur_prov, sur_prov)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    train_cd: list = field(default_factory=list)
    val_cd: list = field(default_factory=list)
    lap_term: list = field(default_factory=list)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["epoch", "train_cd", "val_cd", "lap_term"])
            for row in zip(self.epochs, self.train_cd, self.val_cd, self.lap_term):
                wr.writerow([row[0], f"{row[1]:.9e}", f"{row[2]:.9e}", f"{row[3]:.9e}"])


def prediction_cd_mean(pred_points: np.ndarray, gt: LabeledPointCloud) -> float:
    return chamfer(pred_points, gt.points).mean


def train_skeleton(train_set, val_set, cfg: SkeletonConfig, seed: int,
                   stop_at_val_fraction: float | None = None,
                   progress=None):
    """Train the skeleton stage. Datasets are sequences of (image, gt cloud)
    pairs; images may be SilhouetteImage or raw pixel arrays.

    Returns (best weights, TrainHistory). Deterministic given seed. Training
    aborts with NumericalAbort if the loss goes NaN. If stop_at_val_fraction
    is set, stops early once validation CD drops below that fraction of its
    epoch-0 value.
    """
    if not train_set:
        raise ValueError("empty training set")
    weights = init_skeleton_weights(cfg, seed)
    params = skeleton_parameters(weights)
    state = ta.AdamState(params, lr=cfg.lr)
    rng = np.random.default_rng(seed + 1)
    bank = cfg.bank
    history = TrainHistory()

    def eval_cd(dataset):
        vals = []
        for image, gt in dataset:
            pred = infer_skeleton(image, weights, cfg)
            vals.append(prediction_cd_mean(pred.all_points(), gt))
        return float(np.mean(vals)) if vals else float("nan")

    base_val = eval_cd(val_set if val_set else train_set)
    best_val = np.inf
    best_weights = {k: v.data.copy() for k, v in weights.items()}
    n_layers = len(cfg.mlp_widths) + 1

    for epoch in range(cfg.epochs):
        state.lr = cfg.lr if epoch < cfg.lr_drop_epoch else cfg.lr_drop
        order = rng.permutation(len(train_set))
        epoch_cd = 0.0
        epoch_lap = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = [train_set[i] for i in order[start:start + cfg.batch_size]]
            b = len(batch)
            with ta.Tape() as tape:
                latents = [encode(img, weights, cfg) for img, _ in batch]
                loss_terms = []
                cd_probe, lap_probe = [], []
                if cfg.variant == "point_regression":
                    for lat, (_, gt) in zip(latents, batch):
                        pts = _decode_point_regression(lat, weights, cfg.output_point_count())
                        loss_terms.append(ta.chamfer_loss(pts, gt.points))
                        cd_probe.append(loss_terms[-1])
                else:
                    curve_outs = (_decode_stream(latents, bank.line_params(), weights,
                                                 "cur", bank.n_lines, n_layers)
                                  if cfg.uses_lines else None)
                    surf_outs = (_decode_stream(latents, bank.square_params(), weights,
                                                "sur", bank.n_squares, n_layers)
                                 if cfg.uses_squares else None)
                    t_n = bank.samples_per_line
                    g_n = bank.grid_per_square ** 2
                    lam = cfg.lambda_lap_effective
                    for s, (_, gt) in enumerate(batch):
                        cpred = spred = None
                        if curve_outs is not None:
                            chunks = [ta.slice_rows(o, s * t_n, (s + 1) * t_n)
                                      for o in curve_outs]
                            cpred = ta.concat(chunks, axis=0)
                        if surf_outs is not None:
                            chunks = [ta.slice_rows(o, s * g_n, (s + 1) * g_n)
                                      for o in surf_outs]
                            spred = ta.concat(chunks, axis=0)
                        sample_loss = skeleton_loss(cpred, spred, gt, 0.0,
                                                    cfg.label_split, bank)
                        loss_terms.append(sample_loss)
                        cd_probe.append(sample_loss)
                    # Laplacian over whole-batch stream outputs (additive per
                    # sample, so batching the graphs is equivalent)
                    if lam > 0:
                        if curve_outs is not None:
                            g = line_graph(t_n, b)
                            for o in curve_outs:
                                term = ta.scale(ta.laplacian_smoothness(o, g), lam)
                                loss_terms.append(term)
                                lap_probe.append(term)
                        if surf_outs is not None:
                            g = square_graph(bank.grid_per_square, b)
                            for o in surf_outs:
                                term = ta.scale(ta.laplacian_smoothness(o, g), lam)
                                loss_terms.append(term)
                                lap_probe.append(term)
                loss = ta.scale(ta.add_n(loss_terms), 1.0 / b)
                if not np.isfinite(loss.item()):
                    raise NumericalAbort(f"skeleton training diverged at epoch {epoch}")
                tape.backward(loss)
            grads = [p.grad for p in params]
            ta.adam_step(params, grads, state)
            ta.zero_grads(params)
            epoch_cd += sum(t.item() for t in cd_probe)
            epoch_lap += sum(t.item() for t in lap_probe)
        val_cd = eval_cd(val_set if val_set else train_set)
        history.epochs.append(epoch)
        history.train_cd.append(epoch_cd / len(train_set))
        history.val_cd.append(val_cd)
        history.lap_term.append(epoch_lap / len(train_set))
        if progress is not None:
            progress(epoch, history)
        if val_cd < best_val:
            best_val = val_cd
            best_weights = {k: v.data.copy() for k, v in weights.items()}
        if stop_at_val_fraction is not None and val_cd <= stop_at_val_fraction * base_val:
            break
    out = {k: Tensor(v, requires_grad=True) for k, v in best_weights.items()}
    return out, history
