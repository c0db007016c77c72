"""
GSECnet: simplified PointNet pillar encoder, scatter to a dense pseudo-image,
and a depthwise-separable U-Net with CBAM attention that predicts one ground
logit per pillar.

U-Net layout (channels for the default ladder 64, 64, 128, 256)::

    inc    64 -> 64   @ H        CBAM  -> skip0
    down1  64 -> 64   @ H/2      CBAM  -> skip1
    down2  64 -> 128  @ H/4      CBAM  -> skip2
    down3  128 -> 256 @ H/8      CBAM  (bottleneck)
    up1    256+128 -> 128 @ H/4
    up2    128+64  -> 64  @ H/2
    up3    64+64   -> 64  @ H
    head   1x1 conv 64 -> 1
"""

from __future__ import annotations

import copy
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from . import __version__
from .blob import read_blob, write_blob
from .config import RunConfig
from .errors import CheckpointMismatch, EmptyDataset, ShapeMismatch
from .geometry import estimate_normals
from .lidar_io import PointCloud
from .metrics import ConfusionCounts, accumulate, scores
from .neuralnet.layers import CBAM, DoubleDSC, LinearBNReLU, maxpool2, upsample_bilinear2
from .neuralnet.loss import focal_loss
from .neuralnet.optim import Adam, PlateauScheduler
from .pillars import GridConfig, PillarBatch, PillarLabels, pillarize, propagate_to_points
from .sampling import undersample, undersample_uniform

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"GSCK"


@dataclass(frozen=True)
class ModelConfig:
    in_features: int = 12
    encoder_channels: int = 64
    grid: tuple[int, int] = (128, 128)
    ladder: tuple[int, int, int, int] = (64, 64, 128, 256)
    attention: bool = True
    reduction: int = 16
    head_channels: int = 1

    def __post_init__(self):
        if len(self.ladder) != 4:
            raise ShapeMismatch("three pooling levels need a four-entry channel ladder")
        if self.grid[0] % 8 or self.grid[1] % 8:
            raise ShapeMismatch(f"grid {self.grid} must be divisible by 8")
        if self.head_channels != 1:
            raise ShapeMismatch("the head predicts a single ground logit")

    @classmethod
    def from_run(cls, cfg: RunConfig) -> "ModelConfig":
        g = cfg.grid
        return cls(cfg.n_features, cfg.encoder_channels, g.shape, tuple(cfg.ladder),
                   cfg.attention, cfg.reduction)


class PillarEncoder(nn.Module):
    """Per-point linear+BN+ReLU, max over each pillar's valid points, scatter."""

    def __init__(self, in_features: int = 12, channels: int = 64):
        super().__init__()
        self.pointnet = LinearBNReLU(in_features, channels)
        self.channels = channels

    def forward(self, features, counts, coords, frame, n_frames: int, grid: tuple[int, int]):
        P, K, _ = features.shape
        H, W = grid
        if P == 0:
            return features.new_zeros((n_frames, self.channels, H, W))
        mask = torch.arange(K, device=features.device)[None, :] < counts[:, None]
        per_point = self.pointnet(features[mask])
        slots = features.new_full((P, K, self.channels), float("-inf"))
        slots = slots.index_put((mask.nonzero(as_tuple=True)), per_point)
        pillar_vec = slots.amax(dim=1)
        flat = frame * (H * W) + coords[:, 0] * W + coords[:, 1]
        canvas = features.new_zeros((n_frames * H * W, self.channels))
        canvas = canvas.index_put((flat,), pillar_vec)
        return canvas.view(n_frames, H, W, self.channels).permute(0, 3, 1, 2).contiguous()


class _EncoderLevel(nn.Module):
    def __init__(self, cin, cout, attention, reduction):
        super().__init__()
        self.conv = DoubleDSC(cin, cout)
        self.attn = CBAM(cout, reduction) if attention else nn.Identity()

    def forward(self, x):
        return self.attn(self.conv(x))


class DSUNet(nn.Module):
    def __init__(self, in_channels=64, ladder=(64, 64, 128, 256), attention=True, reduction=16):
        super().__init__()
        c0, c1, c2, c3 = ladder
        self.inc = _EncoderLevel(in_channels, c0, attention, reduction)
        self.down1 = _EncoderLevel(c0, c1, attention, reduction)
        self.down2 = _EncoderLevel(c1, c2, attention, reduction)
        self.down3 = _EncoderLevel(c2, c3, attention, reduction)
        self.up1 = DoubleDSC(c3 + c2, c2)
        self.up2 = DoubleDSC(c2 + c1, c1)
        self.up3 = DoubleDSC(c1 + c0, c0)
        self.head = nn.Conv2d(c0, 1, 1)

    def forward(self, x):
        s0 = self.inc(x)
        s1 = self.down1(maxpool2(s0))
        s2 = self.down2(maxpool2(s1))
        b = self.down3(maxpool2(s2))
        y = self.up1(torch.cat([upsample_bilinear2(b), s2], dim=1))
        y = self.up2(torch.cat([upsample_bilinear2(y), s1], dim=1))
        y = self.up3(torch.cat([upsample_bilinear2(y), s0], dim=1))
        return self.head(y)


class GSECNet(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        self.encoder = PillarEncoder(cfg.in_features, cfg.encoder_channels)
        self.unet = DSUNet(cfg.encoder_channels, cfg.ladder, cfg.attention, cfg.reduction)

    def encode(self, batch: "TorchBatch"):
        return self.encoder(batch.features, batch.counts, batch.coords, batch.frame,
                            batch.n_frames, self.cfg.grid)

    def forward(self, batch: "TorchBatch"):
        return self.unet(self.encode(batch))


@dataclass
class TorchBatch:
    features: torch.Tensor
    counts: torch.Tensor
    coords: torch.Tensor
    frame: torch.Tensor
    n_frames: int

    @classmethod
    def from_numpy(cls, b: PillarBatch, dtype=torch.float32) -> "TorchBatch":
        return cls(torch.as_tensor(b.features, dtype=dtype), torch.as_tensor(b.counts),
                   torch.as_tensor(b.coords), torch.as_tensor(b.frame), b.n_frames)


def encode_pillars(batch: PillarBatch, encoder: PillarEncoder, grid=(128, 128)) -> torch.Tensor:
    """Pillars feature map (frames, channels, H, W); vacant cells are zero."""
    tb = TorchBatch.from_numpy(batch, encoder.pointnet.linear.weight.dtype)
    if batch.features.shape[-1] != encoder.pointnet.linear.in_features:
        raise ShapeMismatch(f"{batch.features.shape[-1]} features, encoder expects "
                            f"{encoder.pointnet.linear.in_features}")
    return encoder(tb.features, tb.counts, tb.coords, tb.frame, tb.n_frames, grid)


def forward(feature_map: torch.Tensor, unet: DSUNet) -> torch.Tensor:
    if feature_map.dim() != 4 or feature_map.shape[1] != unet.inc.conv.first.depthwise.shape[0]:
        raise ShapeMismatch(f"feature map {tuple(feature_map.shape)} does not fit the network")
    return unet(feature_map)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def _registry(model: nn.Module) -> dict[str, torch.Tensor]:
    state = model.state_dict()
    return {k: v for k, v in state.items() if not k.endswith("num_batches_tracked")}


def save_checkpoint(path, model: GSECNet, run: RunConfig, extra: Optional[dict] = None) -> None:
    arrays = {k: v.detach().cpu().numpy().astype("<f4") for k, v in _registry(model).items()}
    meta = {"model": _model_dict(model.cfg), "run": run.to_dict(), "config_hash": run.hash,
            "version": __version__, **(extra or {})}
    write_blob(path, CHECKPOINT_MAGIC, arrays, meta)


def _model_dict(cfg: ModelConfig) -> dict:
    return {"in_features": cfg.in_features, "encoder_channels": cfg.encoder_channels,
            "grid": list(cfg.grid), "ladder": list(cfg.ladder), "attention": cfg.attention,
            "reduction": cfg.reduction}


def load_checkpoint(path, expect: Optional[ModelConfig] = None) -> tuple[GSECNet, RunConfig, dict]:
    arrays, meta = read_blob(path, CHECKPOINT_MAGIC)
    m = meta["model"]
    cfg = ModelConfig(m["in_features"], m["encoder_channels"], tuple(m["grid"]),
                      tuple(m["ladder"]), m["attention"], m["reduction"])
    if expect is not None and expect != cfg:
        raise CheckpointMismatch(f"checkpoint model {cfg} != expected {expect}")
    model = GSECNet(cfg)
    reg = _registry(model)
    if set(reg) != set(arrays):
        missing, unexpected = set(reg) - set(arrays), set(arrays) - set(reg)
        raise CheckpointMismatch(f"missing {sorted(missing)}, unexpected {sorted(unexpected)}")
    state = {}
    for k, v in reg.items():
        if tuple(arrays[k].shape) != tuple(v.shape):
            raise CheckpointMismatch(f"{k}: shape {arrays[k].shape} != {tuple(v.shape)}")
        state[k] = torch.from_numpy(arrays[k].astype(np.float32))
    model.load_state_dict(state, strict=False)
    model.eval()
    return model, RunConfig.from_dict(meta["run"]), meta


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: GSECNet
    losses: list[float]  # per step
    records: list[dict]  # per epoch
    best_state: dict
    best_miou: Optional[float]


def _pillar_counts(logits: torch.Tensor, labels: torch.Tensor) -> ConfusionCounts:
    pred = (logits.detach() > 0).cpu().numpy().astype(np.int8).ravel()
    return accumulate(pred, labels.cpu().numpy().astype(np.int8).ravel())


def train(dataset: Sequence[tuple[PillarBatch, PillarLabels]], config: RunConfig = RunConfig(),
          seed: Optional[int] = None, *, steps: Optional[int] = None,
          validation: Optional[Sequence[tuple[PillarBatch, PillarLabels]]] = None,
          on_record: Optional[Callable[[dict], None]] = None,
          dtype=torch.float32) -> TrainResult:
    """Train GSECnet with Adam, focal loss and a plateau schedule.

    Runs ``steps`` optimizer steps when given (``config.steps`` otherwise,
    falling back to ``config.epochs`` full passes).  The best epoch by
    validation pillar-IoU (training IoU when no validation set) is kept.
    """
    if not dataset:
        raise EmptyDataset("no training scenes")
    seed = config.seed if seed is None else seed
    steps = steps or config.steps or None
    mcfg = ModelConfig.from_run(config)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = GSECNet(mcfg).to(dtype)
    opt = Adam(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    sched = PlateauScheduler(opt, config.plateau_factor, config.plateau_patience, config.plateau_threshold)
    rng = np.random.default_rng(seed)
    variant = "w/ normals" if config.use_normals else "w/o normals"

    scenes = [(b, torch.as_tensor(l.labels[None].astype(np.float32)).to(dtype)) for b, l in dataset]
    bs = min(config.batch_size, len(scenes))
    losses: list[float] = []
    records: list[dict] = []
    best_state, best_miou = copy.deepcopy(model.state_dict()), None
    epoch = 0
    while True:
        if steps is None and epoch >= config.epochs:
            break
        if steps is not None and len(losses) >= steps:
            break
        model.train()
        order = rng.permutation(len(scenes))
        epoch_losses, counts = [], ConfusionCounts()
        for lo in range(0, len(order), bs):
            if steps is not None and len(losses) >= steps:
                break
            chosen = order[lo:lo + bs]
            batch = TorchBatch.from_numpy(PillarBatch.collate(scenes[i][0] for i in chosen), dtype)
            target = torch.stack([scenes[i][1] for i in chosen])
            opt.zero_grad()
            logits = model(batch)
            loss = focal_loss(logits, target, config.focal_alpha, config.focal_gamma)
            loss.backward()
            opt.step()
            lv = loss.item()
            losses.append(lv)
            epoch_losses.append(lv)
            counts = counts + _pillar_counts(logits, target)
        epoch_loss = float(np.mean(epoch_losses))
        reduced = sched.step(epoch_loss)
        miou = scores(counts).ground_iou
        if validation:
            miou = evaluate_pillars(model, validation).ground_iou
        rec = {"epoch": epoch, "step": len(losses), "loss": epoch_loss, "lr": opt.state.lr,
               "miou": miou, "lr_reduced": reduced, "variant": variant}
        records.append(rec)
        if on_record:
            on_record(rec)
        log.info("epoch %d step %d loss %.5f lr %.2e miou %s", epoch, len(losses), epoch_loss,
                 opt.state.lr, miou)
        if miou is not None and (best_miou is None or miou > best_miou):
            best_miou, best_state = miou, copy.deepcopy(model.state_dict())
        epoch += 1
    return TrainResult(model, losses, records, best_state, best_miou)


@torch.no_grad()
def evaluate_pillars(model: GSECNet, data: Sequence[tuple[PillarBatch, PillarLabels]]):
    model.eval()
    dtype = next(model.parameters()).dtype
    total = ConfusionCounts()
    for b, l in data:
        logits = model(TorchBatch.from_numpy(b, dtype))
        total = total + accumulate((logits[0, 0] > 0).numpy().astype(np.int8).ravel(),
                                   l.labels.astype(np.int8).ravel())
    return scores(total)


# ---------------------------------------------------------------------------
# Inference pipeline
# ---------------------------------------------------------------------------


def logit_threshold(p: float) -> float:
    if p <= 0.0:
        return float("-inf")
    if p >= 1.0:
        return float("inf")
    return float(np.log(p / (1 - p)))


class Pipeline:
    """Stage-by-stage inference; each stage maps a context dict to itself."""

    STAGES = ("undersample", "normals", "pillarize", "encode", "forward", "propagate")

    def __init__(self, model: GSECNet, config: RunConfig, threshold: Optional[float] = None):
        self.model = model.eval()
        self.config = config
        self.threshold = config.threshold if threshold is None else threshold
        self.grid_cfg: GridConfig = config.grid
        if self.grid_cfg.shape != tuple(model.cfg.grid) or config.n_features != model.cfg.in_features:
            raise CheckpointMismatch("run config does not match the checkpoint's network")

    def stages(self):
        return [(name, getattr(self, "_" + name)) for name in self.STAGES]

    def _undersample(self, ctx):
        c, cfg = ctx["cloud"], self.config
        if cfg.undersample == "controlled":
            ctx["sampled"] = undersample(c, cfg.budget, cfg.section_interval, cfg.seed, self.grid_cfg.x_range[1])
        elif cfg.undersample == "uniform":
            ctx["sampled"] = undersample_uniform(c, cfg.budget, cfg.seed)
        else:
            ctx["sampled"] = c
        return ctx

    def _normals(self, ctx):
        sampled = ctx["sampled"]
        if self.config.use_normals and len(sampled):
            est = estimate_normals(sampled, self.config.k, self.config.corrected_normal_sign)
            ctx["normals"], ctx["normal_fallbacks"] = est.normals, est.fallbacks
        else:
            ctx["normals"] = None
        return ctx

    def _pillarize(self, ctx):
        ctx["grid"] = pillarize(ctx["sampled"], ctx["normals"], self.grid_cfg, self.config.seed,
                                with_normals=self.config.use_normals)
        return ctx

    @torch.no_grad()
    def _encode(self, ctx):
        ctx["feature_map"] = encode_pillars(ctx["grid"].to_batch(), self.model.encoder, self.model.cfg.grid)
        return ctx

    @torch.no_grad()
    def _forward(self, ctx):
        ctx["logits"] = forward(ctx["feature_map"], self.model.unet)[0, 0].double().numpy()
        return ctx

    def _propagate(self, ctx):
        pillar_map = (ctx["logits"] > logit_threshold(self.threshold)).astype(np.uint8)
        full = pillarize(ctx["cloud"], None, self.grid_cfg, with_normals=False)
        ctx["pillar_map"] = pillar_map
        ctx["point_labels"] = propagate_to_points(pillar_map, full)
        logits_pt = np.full(len(ctx["cloud"]), np.nan)
        inside = full.point_pillar >= 0
        cells = full.coords[full.point_pillar[inside]]
        logits_pt[inside] = ctx["logits"][cells[:, 0], cells[:, 1]]
        ctx["point_prob"] = 1.0 / (1.0 + np.exp(-logits_pt))
        ctx["point_grid"] = full
        return ctx

    def run(self, cloud: PointCloud) -> dict:
        ctx = {"cloud": cloud, "timings": {}}
        for name, fn in self.stages():
            t0 = time.perf_counter()
            ctx = fn(ctx)
            ctx["timings"][name] = time.perf_counter() - t0
        return ctx


@dataclass
class InferResult:
    point_labels: np.ndarray  # (N,) int8: 1 ground, 0 non-ground, -1 unscored
    point_prob: np.ndarray  # (N,) float64, NaN where unscored
    pillar_map: np.ndarray  # (H, W) uint8
    logits: np.ndarray  # (H, W)
    timings: dict = field(default_factory=dict)


def infer(cloud: PointCloud, model: GSECNet, config: RunConfig, threshold: Optional[float] = None) -> InferResult:
    ctx = Pipeline(model, config, threshold).run(cloud)
    return InferResult(ctx["point_labels"], ctx["point_prob"], ctx["pillar_map"], ctx["logits"], ctx["timings"])
