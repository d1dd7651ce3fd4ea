"""Change-detection model: N-stage weight-shared encoder with an optional
MoE layer after every stage, run over three paths (OP: pre-event optical,
SP: post-event SAR, O2SP: simulated SAR bridged from the pre-event image),
plus a multi-level fusion decoder producing a per-pixel change probability.

The bridge path exists only in training mode; inference touches OP and SP
exclusively, so enabling it costs nothing at test time.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import CheckpointError, CheckpointNotFoundError, ConfigurationError, ShapeError
from .moe import GateDecision, MoeConfig, MoeLayer
from .speckle import SpeckleConfig, optical_to_sar_batch

STAGE_KINDS = ("conv_stage", "attention_stage")
PATH_TAGS = ("OP", "SP", "O2SP")
CHECKPOINT_MAGIC = "M2CD-CKPT-v1"


@dataclass(frozen=True)
class BackboneConfig:
    num_stages: int = 4
    stage_channels: tuple[int, ...] = (32, 64, 128, 256)
    stage_kind: str = "conv_stage"
    downsample_factors: tuple[int, ...] = (4, 2, 2, 2)
    input_channels: int = 3

    def __post_init__(self):
        if self.num_stages < 2:
            raise ConfigurationError(f"num_stages must be >= 2, got {self.num_stages}")
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        object.__setattr__(
            self, "downsample_factors", tuple(int(f) for f in self.downsample_factors)
        )
        if len(self.stage_channels) != self.num_stages:
            raise ConfigurationError("stage_channels length must equal num_stages")
        if len(self.downsample_factors) != self.num_stages:
            raise ConfigurationError("downsample_factors length must equal num_stages")
        if self.stage_kind not in STAGE_KINDS:
            raise ConfigurationError(f"stage_kind must be one of {STAGE_KINDS}")
        if any(f < 1 for f in self.downsample_factors) or any(c < 1 for c in self.stage_channels):
            raise ConfigurationError("stage channels and downsample factors must be >= 1")

    @property
    def total_stride(self) -> int:
        return math.prod(self.downsample_factors)


@dataclass
class FeaturePyramid:
    """Ordered per-stage feature maps for one path through the encoder."""

    levels: list[Tensor]
    path_tag: str = "OP"

    def __post_init__(self):
        if self.path_tag not in PATH_TAGS:
            raise ConfigurationError(f"path_tag must be one of {PATH_TAGS}")

    def __len__(self):
        return len(self.levels)

    def __iter__(self):
        return iter(self.levels)

    def __getitem__(self, i):
        return self.levels[i]


def _norm(channels: int) -> nn.GroupNorm:
    groups = min(8, channels)
    while channels % groups:
        groups -= 1
    return nn.GroupNorm(groups, channels)


class ConvStage(nn.Module):
    """Strided patch embedding followed by two 3x3 conv blocks."""

    def __init__(self, c_in: int, c_out: int, factor: int):
        super().__init__()
        self.embed = nn.Conv2d(c_in, c_out, kernel_size=max(factor, 1), stride=factor)
        self.embed_norm = _norm(c_out)
        self.block = nn.Sequential(
            nn.Conv2d(c_out, c_out, 3, padding=1),
            _norm(c_out),
            nn.GELU(),
            nn.Conv2d(c_out, c_out, 3, padding=1),
            _norm(c_out),
            nn.GELU(),
        )

    def forward(self, x: Tensor) -> Tensor:
        return self.block(self.embed_norm(self.embed(x)))


class AttentionStage(nn.Module):
    """Strided patch embedding followed by one pre-norm self-attention block."""

    def __init__(self, c_in: int, c_out: int, factor: int):
        super().__init__()
        self.embed = nn.Conv2d(c_in, c_out, kernel_size=max(factor, 1), stride=factor)
        self.norm1 = nn.LayerNorm(c_out)
        self.attn = nn.MultiheadAttention(c_out, num_heads=max(1, c_out // 32), batch_first=True)
        self.norm2 = nn.LayerNorm(c_out)
        self.mlp = nn.Sequential(
            nn.Linear(c_out, 2 * c_out), nn.GELU(), nn.Linear(2 * c_out, c_out)
        )

    def forward(self, x: Tensor) -> Tensor:
        x = self.embed(x)
        b, c, h, w = x.shape
        tokens = x.flatten(2).transpose(1, 2)
        y = self.norm1(tokens)
        tokens = tokens + self.attn(y, y, y, need_weights=False)[0]
        tokens = tokens + self.mlp(self.norm2(tokens))
        return tokens.transpose(1, 2).reshape(b, c, h, w)


class ChangeDecoder(nn.Module):
    """Fuses two pyramids level-by-level and predicts a change probability map.

    Per level the input is concat(op, sp, |op - sp|) projected to a common
    width; all levels are upsampled to the finest level's resolution,
    concatenated, passed through a small conv head, upsampled to the target
    size, and squashed with a sigmoid.
    """

    def __init__(self, stage_channels: tuple[int, ...], width: int = 32):
        super().__init__()
        self.width = width
        self.projs = nn.ModuleList(
            nn.Sequential(nn.Conv2d(3 * c, width, 1), _norm(width), nn.GELU())
            for c in stage_channels
        )
        head_width = 2 * width
        self.head = nn.Sequential(
            nn.Conv2d(len(stage_channels) * width, head_width, 3, padding=1),
            _norm(head_width),
            nn.GELU(),
            nn.Conv2d(head_width, 1, 1),
        )

    @staticmethod
    def fusion_inputs(op: FeaturePyramid, sp: FeaturePyramid) -> list[Tensor]:
        if len(op) != len(sp):
            raise ShapeError(f"pyramid depth mismatch: {len(op)} vs {len(sp)}")
        fused = []
        for i, (a, b) in enumerate(zip(op, sp)):
            if a.shape != b.shape:
                raise ShapeError(
                    f"pyramid shape mismatch at level {i}: {tuple(a.shape)} vs {tuple(b.shape)}"
                )
            fused.append(torch.cat([a, b, (a - b).abs()], dim=1))
        return fused

    def forward(self, op: FeaturePyramid, sp: FeaturePyramid, out_size: tuple[int, int]) -> Tensor:
        fused = self.fusion_inputs(op, sp)
        target = fused[0].shape[-2:]
        merged = []
        for proj, x in zip(self.projs, fused):
            y = proj(x)
            if y.shape[-2:] != target:
                y = F.interpolate(y, size=target, mode="bilinear", align_corners=False)
            merged.append(y)
        logits = self.head(torch.cat(merged, dim=1))
        logits = F.interpolate(logits, size=out_size, mode="bilinear", align_corners=False)
        return torch.sigmoid(logits)


@dataclass
class ThreePathOutput:
    op: FeaturePyramid
    sp: FeaturePyramid
    o2sp: FeaturePyramid | None
    change_map: Tensor
    gate_log: dict = field(default_factory=dict)


class ChangeDetector(nn.Module):
    """Weight-shared three-path encoder plus change decoder.

    One encoder instance (and one MoE layer per stage) serves the OP, SP,
    and O2SP paths; parameter updates from any path update all of them.
    """

    def __init__(
        self,
        backbone: BackboneConfig,
        moe_enabled: bool = True,
        moe_num_experts: int = 4,
        moe_top_k: int = 2,
        moe_embed_dim: int = 16,
        moe_init_noise_std: float = 0.01,
        decoder_width: int = 32,
    ):
        super().__init__()
        self.backbone_config = backbone
        self.moe_enabled = moe_enabled
        self.moe_settings = {
            "num_experts": moe_num_experts,
            "top_k": moe_top_k,
            "embed_dim": moe_embed_dim,
        }
        self.decoder_width = decoder_width

        stage_cls = ConvStage if backbone.stage_kind == "conv_stage" else AttentionStage
        chans = (backbone.input_channels,) + backbone.stage_channels
        self.stages = nn.ModuleList(
            stage_cls(chans[i], chans[i + 1], backbone.downsample_factors[i])
            for i in range(backbone.num_stages)
        )
        if moe_enabled:
            self.moe_layers = nn.ModuleList(
                MoeLayer(
                    MoeConfig(
                        channels=c,
                        num_experts=moe_num_experts,
                        top_k=moe_top_k,
                        embed_dim=moe_embed_dim,
                    ),
                    init_noise_std=moe_init_noise_std,
                )
                for c in backbone.stage_channels
            )
        else:
            self.moe_layers = None
        self.decoder = ChangeDecoder(backbone.stage_channels, width=decoder_width)

    def _check_input(self, image: Tensor):
        cfg = self.backbone_config
        if image.dim() != 4 or image.shape[1] != cfg.input_channels:
            raise ShapeError(
                f"expected (B, {cfg.input_channels}, H, W) input, got {tuple(image.shape)}"
            )
        h, w = image.shape[-2:]
        stride = cfg.total_stride
        if h % stride or w % stride:
            raise ShapeError(
                f"input spatial size {h}x{w} not divisible by total stride {stride}"
            )

    def encode(
        self,
        image: Tensor,
        moe_enabled: bool | None = None,
        path_tag: str = "OP",
        collect_gates: bool = False,
    ) -> FeaturePyramid | tuple[FeaturePyramid, list[list[GateDecision]]]:
        """Run one path through the shared stages (and MoE layers when enabled).

        The MoE output replaces the stage output both in the recorded pyramid
        and as the next stage's input.
        """
        self._check_input(image)
        use_moe = self.moe_enabled if moe_enabled is None else moe_enabled
        if use_moe and self.moe_layers is None:
            raise ConfigurationError("model was built without MoE layers")
        levels = []
        gates: list[list[GateDecision]] = []
        x = image
        for i, stage in enumerate(self.stages):
            x = stage(x)
            if use_moe:
                layer = self.moe_layers[i]
                if collect_gates:
                    gates.append(layer.gate_decisions(x))
                x = layer(x)
            levels.append(x)
        pyramid = FeaturePyramid(levels=levels, path_tag=path_tag)
        if collect_gates:
            return pyramid, gates
        return pyramid

    def decode(
        self, op: FeaturePyramid, sp: FeaturePyramid, out_size: tuple[int, int]
    ) -> Tensor:
        return self.decoder(op, sp, out_size)

    def forward(self, pre: Tensor, post: Tensor) -> Tensor:
        """Inference path: change probabilities (B, 1, H, W) from an image pair."""
        op = self.encode(pre, path_tag="OP")
        sp = self.encode(post, path_tag="SP")
        return self.decode(op, sp, pre.shape[-2:])

    def forward_three_path(
        self,
        pre: Tensor,
        post: Tensor,
        o2sp_enabled: bool = True,
        speckle_config: SpeckleConfig | None = None,
        speckle_rng: np.random.Generator | None = None,
        collect_gates: bool = False,
    ) -> ThreePathOutput:
        """Training forward: OP and SP pyramids, the fused change map, and
        (in training mode, when enabled) the O2SP bridge pyramid.

        The bridge never feeds the decoder; requesting it in eval mode is
        silently skipped so inference cost is untouched.
        """
        if pre.shape != post.shape:
            raise ShapeError(
                f"pre/post shape mismatch: {tuple(pre.shape)} vs {tuple(post.shape)}"
            )
        gate_log: dict = {}
        if collect_gates:
            op, gate_log["OP"] = self.encode(pre, path_tag="OP", collect_gates=True)
            sp, gate_log["SP"] = self.encode(post, path_tag="SP", collect_gates=True)
        else:
            op = self.encode(pre, path_tag="OP")
            sp = self.encode(post, path_tag="SP")
        o2sp = None
        if o2sp_enabled and self.training:
            cfg = speckle_config if speckle_config is not None else SpeckleConfig()
            sim = optical_to_sar_batch(pre.detach().cpu().numpy(), cfg, rng=speckle_rng)
            sim_t = torch.from_numpy(sim).to(device=pre.device, dtype=pre.dtype)
            if collect_gates:
                o2sp, gate_log["O2SP"] = self.encode(
                    sim_t, path_tag="O2SP", collect_gates=True
                )
            else:
                o2sp = self.encode(sim_t, path_tag="O2SP")
        change_map = self.decode(op, sp, pre.shape[-2:])
        return ThreePathOutput(op=op, sp=sp, o2sp=o2sp, change_map=change_map, gate_log=gate_log)


def save_checkpoint(
    path: str | Path,
    model: ChangeDetector,
    iteration: int = 0,
    best_val_miou: float = 0.0,
) -> None:
    payload = {
        "magic": CHECKPOINT_MAGIC,
        "backbone": asdict(model.backbone_config),
        "moe_enabled": model.moe_enabled,
        "moe_settings": dict(model.moe_settings),
        "decoder_width": model.decoder_width,
        "iteration": int(iteration),
        "best_val_miou": float(best_val_miou),
        "state_dict": model.state_dict(),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(
    path: str | Path, expected_backbone: BackboneConfig | None = None
) -> tuple[ChangeDetector, dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointNotFoundError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # unreadable or wrong format
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("magic") != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_MAGIC} checkpoint")
    backbone = BackboneConfig(**payload["backbone"])
    if expected_backbone is not None and backbone != expected_backbone:
        raise CheckpointError(
            f"checkpoint backbone {backbone} incompatible with expected {expected_backbone}"
        )
    moe = payload["moe_settings"]
    model = ChangeDetector(
        backbone,
        moe_enabled=payload["moe_enabled"],
        moe_num_experts=moe["num_experts"],
        moe_top_k=moe["top_k"],
        moe_embed_dim=moe["embed_dim"],
        decoder_width=payload["decoder_width"],
    )
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload
