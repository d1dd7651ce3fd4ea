"""Training and evaluation loop: AdamW with warmup + poly decay, periodic
validation, best-mIoU checkpoint selection, and the MoE/O2SP ablation grid.
"""
from __future__ import annotations

import json
import tempfile
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch
import yaml

from .datakit import (
    AugmentationConfig,
    FlipConfig,
    PhotometricConfig,
    RotateConfig,
    augment,
    pair_to_tensors,
    tta_predict,
)
from .errors import ConfigurationError, DataError, TrainingInstabilityError
from .losses import LossConfig, ce_loss, sd_loss, total_loss
from .metrics import ConfusionMatrix, MetricReport, accumulate, compute, report_to_kv
from .network import BackboneConfig, ChangeDetector, load_checkpoint, save_checkpoint
from .speckle import SpeckleConfig


@dataclass
class TrainConfig:
    """Declarative description of one run; every field mirrors a CLI flag."""

    max_iterations: int = 2000
    val_interval: int = 200
    batch_size: int = 8
    lr: float = 6e-5
    warmup_iterations: int = 500
    poly_power: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    weight_decay: float = 0.01
    moe_enabled: bool = True
    o2sp_enabled: bool = True
    moe_num_experts: int = 4
    moe_top_k: int = 2
    moe_embed_dim: int = 16
    moe_init_noise_std: float = 0.01
    decoder_width: int = 32
    threshold: float = 0.5
    seed: int = 0
    deterministic: bool = True
    log_gates: bool = False
    loss: LossConfig = field(default_factory=LossConfig)
    speckle: SpeckleConfig = field(default_factory=SpeckleConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)

    def __post_init__(self):
        if self.max_iterations < 0 or self.val_interval < 1:
            raise ConfigurationError("max_iterations must be >= 0 and val_interval >= 1")
        if self.max_iterations > 0 and self.max_iterations < self.val_interval:
            raise ConfigurationError("max_iterations must be >= val_interval")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigurationError("lr must be > 0 and weight_decay >= 0")
        for name in ("adam_beta1", "adam_beta2"):
            b = getattr(self, name)
            if not (0.0 < b < 1.0):
                raise ConfigurationError(f"{name} must be in (0, 1), got {b}")

    def build_model(self) -> ChangeDetector:
        return ChangeDetector(
            self.backbone,
            moe_enabled=self.moe_enabled,
            moe_num_experts=self.moe_num_experts,
            moe_top_k=self.moe_top_k,
            moe_embed_dim=self.moe_embed_dim,
            moe_init_noise_std=self.moe_init_noise_std,
            decoder_width=self.decoder_width,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        if "loss" in data and isinstance(data["loss"], dict):
            data["loss"] = LossConfig(**data["loss"])
        if "speckle" in data and isinstance(data["speckle"], dict):
            data["speckle"] = SpeckleConfig(**data["speckle"])
        if "backbone" in data and isinstance(data["backbone"], dict):
            bb = dict(data["backbone"])
            for key in ("stage_channels", "downsample_factors"):
                if key in bb:
                    bb[key] = tuple(bb[key])
            data["backbone"] = BackboneConfig(**bb)
        if "augmentation" in data and isinstance(data["augmentation"], dict):
            aug = dict(data["augmentation"])
            sub = {}
            if "rotate" in aug:
                sub["rotate"] = RotateConfig(**aug["rotate"])
            if "flip" in aug:
                sub["flip"] = FlipConfig(**aug["flip"])
            if "photometric" in aug:
                ph = dict(aug["photometric"])
                for key in ("contrast_range", "saturation_range"):
                    if key in ph:
                        ph[key] = tuple(ph[key])
                sub["photometric"] = PhotometricConfig(**ph)
            data["augmentation"] = AugmentationConfig(**sub)
        return cls(**data)


def save_config(config: TrainConfig, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(config.to_dict(), sort_keys=False))


def load_config(path: str | Path) -> TrainConfig:
    data = yaml.safe_load(Path(path).read_text())
    return TrainConfig.from_dict(data or {})


def lr_at(config: TrainConfig, step: int) -> float:
    """Learning rate for 0-based optimizer step: linear warmup then poly decay."""
    warmup = min(config.warmup_iterations, config.max_iterations)
    if warmup > 0 and step < warmup:
        return config.lr * (step + 1) / warmup
    span = max(config.max_iterations - warmup, 1)
    progress = (step - warmup) / span
    return config.lr * max(1.0 - progress, 0.0) ** config.poly_power


@dataclass
class RunState:
    iteration: int = 0
    best_val_miou: float = -1.0
    best_iteration: int = -1
    best_checkpoint_path: str | None = None
    loss_history: list[dict] = field(default_factory=list)
    val_history: list[dict] = field(default_factory=list)
    run_dir: str | None = None


def _stack_batch(pairs) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    pres, posts, labels = zip(*(pair_to_tensors(p) for p in pairs))
    return torch.stack(pres), torch.stack(posts), torch.stack(labels).unsqueeze(1)


def _size_batches(dataset, batch_size: int):
    """Yield index batches of consecutive same-size items (stackable)."""
    batch: list[int] = []
    size = None
    for i in range(len(dataset)):
        s = dataset[i].size
        if batch and (s != size or len(batch) >= batch_size):
            yield batch
            batch = []
        batch.append(i)
        size = s
    if batch:
        yield batch


def train(config: TrainConfig, train_data, val_data, run_dir: str | Path | None = None) -> RunState:
    """Run the full optimization loop and return the final state.

    Validation runs every ``val_interval`` iterations (and at the final
    iteration) without TTA; every mIoU improvement writes ``best.ckpt``.
    A ``max_iterations`` of zero still performs one validation pass and
    checkpoints the initial weights.
    """
    if len(train_data) == 0 or len(val_data) == 0:
        raise DataError("train and validation datasets must be nonempty")
    if run_dir is None:
        run_dir = tempfile.mkdtemp(prefix="m2cd-run-")
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    save_config(config, run_dir / "config.yaml")

    torch.manual_seed(config.seed)
    if config.deterministic:
        torch.use_deterministic_algorithms(True)
    root_ss = np.random.SeedSequence(config.seed)
    sample_rng, aug_rng, speckle_rng = (np.random.default_rng(s) for s in root_ss.spawn(3))

    model = config.build_model()
    model.train()
    optimizer = torch.optim.AdamW(
        model.parameters(),
        lr=config.lr,
        betas=(config.adam_beta1, config.adam_beta2),
        weight_decay=config.weight_decay,
    )

    state = RunState(run_dir=str(run_dir))
    train_log = (run_dir / "train_log.jsonl").open("w")
    gate_log = (run_dir / "gates.jsonl").open("w") if config.log_gates else None

    def run_validation(iteration: int):
        model.eval()
        report = evaluate(model, val_data, batch_size=config.batch_size, threshold=config.threshold)
        model.train()
        state.val_history.append({"iteration": iteration, "m_iou": report.m_iou})
        with (run_dir / "val_log.jsonl").open("a") as f:
            f.write(json.dumps({"iteration": iteration, "m_iou": report.m_iou}) + "\n")
        if report.m_iou > state.best_val_miou:
            state.best_val_miou = report.m_iou
            state.best_iteration = iteration
            ckpt = run_dir / "best.ckpt"
            save_checkpoint(ckpt, model, iteration=iteration, best_val_miou=report.m_iou)
            state.best_checkpoint_path = str(ckpt)
            (run_dir / "best_val_metrics.kv").write_text(report_to_kv(report))

    if config.max_iterations == 0:
        run_validation(0)
        train_log.close()
        if gate_log:
            gate_log.close()
        return state

    last_batch_ids: list[str] = []
    try:
        for it in range(1, config.max_iterations + 1):
            lr = lr_at(config, it - 1)
            for group in optimizer.param_groups:
                group["lr"] = lr

            idx = sample_rng.integers(0, len(train_data), size=config.batch_size)
            pairs = [augment(train_data[int(i)], config.augmentation, aug_rng) for i in idx]
            last_batch_ids = [p.id for p in pairs]
            pre, post, labels = _stack_batch(pairs)

            out = model.forward_three_path(
                pre,
                post,
                o2sp_enabled=config.o2sp_enabled,
                speckle_config=config.speckle,
                speckle_rng=speckle_rng,
                collect_gates=config.log_gates,
            )
            ce = ce_loss(out.change_map, labels, config.loss)
            if out.o2sp is not None:
                sd, per_level = sd_loss(out.op, out.sp, out.o2sp, config.loss)
            else:
                sd, per_level = None, None
            try:
                report = total_loss(ce, sd, config.loss, per_level)
            except TrainingInstabilityError:
                _dump_abort(run_dir, it, last_batch_ids, ce, sd, model)
                raise

            optimizer.zero_grad()
            report.total_tensor.backward()
            optimizer.step()

            record = {
                "iteration": it,
                "ce": report.ce,
                "sd": report.sd,
                "total": report.total,
                "lr": lr,
            }
            state.loss_history.append(record)
            train_log.write(json.dumps(record) + "\n")
            if gate_log:
                for path_tag, stages in out.gate_log.items():
                    for stage_idx, decisions in enumerate(stages):
                        for d in decisions:
                            gate_log.write(
                                json.dumps(
                                    {
                                        "iteration": it,
                                        "stage": stage_idx,
                                        "path": path_tag,
                                        "indices": d.indices,
                                        "weights": d.weights,
                                    }
                                )
                                + "\n"
                            )

            state.iteration = it
            if it % config.val_interval == 0 or it == config.max_iterations:
                run_validation(it)
    finally:
        train_log.close()
        if gate_log:
            gate_log.close()
    return state


def _dump_abort(run_dir: Path, iteration, batch_ids, ce, sd, model):
    fallbacks = None
    if model.moe_layers is not None:
        fallbacks = [layer.zero_gate_fallbacks for layer in model.moe_layers]
    payload = {
        "iteration": iteration,
        "batch_ids": batch_ids,
        "ce": float(ce.detach()) if ce is not None else None,
        "sd": float(sd.detach()) if sd is not None else None,
        "gate_zero_fallbacks": fallbacks,
    }
    (Path(run_dir) / "abort.json").write_text(json.dumps(payload, indent=2))


def evaluate(
    model_or_checkpoint,
    test_data,
    use_tta: bool = False,
    batch_size: int = 8,
    threshold: float = 0.5,
    expected_backbone: BackboneConfig | None = None,
) -> MetricReport:
    """Accumulate one global confusion matrix over the dataset and report.

    The positive class is change; probabilities strictly greater than the
    threshold predict change (a constant map equal to the threshold is
    all-negative). The O2SP bridge is inactive by the inference contract.
    """
    if isinstance(model_or_checkpoint, (str, Path)):
        model, _ = load_checkpoint(model_or_checkpoint, expected_backbone=expected_backbone)
    else:
        model = model_or_checkpoint
    if hasattr(model, "eval"):
        model.eval()
    cm = ConfusionMatrix()
    with torch.no_grad():
        for batch_idx in _size_batches(test_data, batch_size):
            pre, post, labels = _stack_batch([test_data[i] for i in batch_idx])
            probs = tta_predict(model, pre, post) if use_tta else model(pre, post)
            pred = (probs > threshold).squeeze(1).cpu().numpy().astype(np.uint8)
            gt = labels.squeeze(1).cpu().numpy().astype(np.uint8)
            for p, g in zip(pred, gt):
                cm = accumulate(cm, p, g)
    return compute(cm)


ABLATION_COMBOS = ((True, True), (True, False), (False, True), (False, False))


def ablation_name(moe: bool, o2sp: bool) -> str:
    return f"{'+' if moe else '-'}MoE {'+' if o2sp else '-'}O2SP"


def run_ablation_grid(
    base: TrainConfig,
    train_data,
    val_data,
    eval_data=None,
    run_root: str | Path | None = None,
    use_tta: bool = False,
) -> list[dict]:
    """Train the four {MoE} x {O2SP} combinations from identical seeds/data
    and evaluate each best checkpoint. Returns one row dict per combination."""
    if run_root is None:
        run_root = tempfile.mkdtemp(prefix="m2cd-ablation-")
    run_root = Path(run_root)
    eval_data = eval_data if eval_data is not None else val_data
    rows = []
    for moe, o2sp in ABLATION_COMBOS:
        cfg = replace(base, moe_enabled=moe, o2sp_enabled=o2sp)
        sub = run_root / f"moe{int(moe)}_o2sp{int(o2sp)}"
        state = train(cfg, train_data, val_data, run_dir=sub)
        report = evaluate(
            state.best_checkpoint_path,
            eval_data,
            use_tta=use_tta,
            batch_size=cfg.batch_size,
            threshold=cfg.threshold,
        )
        rows.append(
            {
                "moe": moe,
                "o2sp": o2sp,
                "name": ablation_name(moe, o2sp),
                "report": report,
                "state": state,
            }
        )
    return rows


def measure_inference_latency(model, pre, post, o2sp_enabled: bool, repeats: int = 20) -> float:
    """Best-of-N latency of one eval-mode forward (seconds)."""
    model.eval()
    best = float("inf")
    with torch.no_grad():
        for _ in range(repeats):
            t0 = time.perf_counter()
            model.forward_three_path(pre, post, o2sp_enabled=o2sp_enabled)
            best = min(best, time.perf_counter() - t0)
    return best


def measure_latency_pair(model, pre, post, repeats: int = 40) -> tuple[float, float]:
    """Median eval-mode latencies with the bridge flag on vs off (seconds).

    Samples are paired and the within-pair order alternates every round, so
    machine-load drift and warm-cache position bias cancel instead of
    polluting the comparison.
    """
    model.eval()
    times = {True: [], False: []}
    with torch.no_grad():
        for _ in range(3):  # warmup
            model.forward_three_path(pre, post, o2sp_enabled=True)
            model.forward_three_path(pre, post, o2sp_enabled=False)
        for i in range(repeats):
            order = (True, False) if i % 2 == 0 else (False, True)
            for flag in order:
                t0 = time.perf_counter()
                model.forward_three_path(pre, post, o2sp_enabled=flag)
                times[flag].append(time.perf_counter() - t0)
    med = {flag: sorted(vals)[len(vals) // 2] for flag, vals in times.items()}
    return med[True], med[False]
