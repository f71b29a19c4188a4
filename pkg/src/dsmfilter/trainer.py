"""Alternating generator/discriminator training with learned loss weights."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import platform
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import objectives as obj
from .dataset import HEIGHT_RANGE, SceneArea, SceneSample, epoch_sampler, normalize_batch
from .network import Generator, ModelSpec, NetworkBundle, build_bundle
from .raster import Metrics, NUM_CLASSES, confusion_matrix, miou_from_confusion

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "dsmfilter-checkpoint"
CHECKPOINT_VERSION = 1

FULL_OBJECTIVES = ("l1", "normal", "gan", "seg")
ABLATION_ROWS = (
    (("l1",), "none"),
    (("l1", "normal"), "learned"),
    (("l1", "normal", "gan"), "learned"),
    (FULL_OBJECTIVES, "fixed"),
    (FULL_OBJECTIVES, "learned"),
)


class DivergenceError(RuntimeError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


@dataclass
class TrainConfig:
    model: ModelSpec = field(default_factory=ModelSpec)
    batch_size: int = 5
    learning_rate: float = 5e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    epochs: int = 100
    seed: int = 0
    patch_size: int = 256
    max_shift: int = 256
    weighting: str = "learned"  # or "fixed"
    s_l1: float = 0.0
    s_normal: float = 0.0
    s_seg: float = 0.0
    s_gan: float = 1.0
    weight_learning_rate: float | None = None  # None: same group as the network
    validate_every: int = 1
    height_scale: float = HEIGHT_RANGE

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelSpec.from_dict(self.model)
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.weighting not in ("learned", "fixed", "none"):
            raise ValueError(f"unknown weighting mode {self.weighting!r}")

    def initial_weights(self) -> obj.WeightState:
        return obj.WeightState(self.s_l1, self.s_normal, self.s_seg, self.s_gan,
                               learnable=self.weighting == "learned")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train fields: {sorted(unknown)}")
        if "model" in d and isinstance(d["model"], dict):
            d["model"] = ModelSpec.from_dict(d["model"])
        return cls(**d)


@dataclass
class TrainingRun:
    config: TrainConfig
    step_log: list[dict] = field(default_factory=list)
    epoch_metrics: list[dict] = field(default_factory=list)
    weight_trajectory: list[dict] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)
    best_epoch: int | None = None
    best_rmse: float = math.inf
    best_state: dict | None = None
    run_dir: Path | None = None

    def rmse_series(self) -> list[float]:
        return [row["rmse"] for row in self.epoch_metrics]


# ---------------------------------------------------------------------------
# Prediction wrappers
# ---------------------------------------------------------------------------


class NetworkPredictor:
    """Runs a generator on raw-meter patches, handling normalization."""

    def __init__(self, generator: Generator, batch_size: int = 16, height_scale: float = HEIGHT_RANGE):
        self.generator = generator
        self.batch_size = batch_size
        self.height_scale = height_scale

    @property
    def has_seg(self) -> bool:
        return self.generator.seg_head is not None

    @torch.no_grad()
    def predict(self, inputs: np.ndarray):
        """``inputs`` ``(N, H, W)`` meters -> heights ``(N, H, W)``, logits ``(N, C, H, W)`` or None."""
        self.generator.eval()
        heights, logits = [], []
        for i in range(0, len(inputs), self.batch_size):
            chunk = np.asarray(inputs[i:i + self.batch_size], dtype=np.float64)
            shift = chunk.reshape(len(chunk), -1).min(axis=1)[:, None, None]
            x = torch.from_numpy(((chunk - shift) / self.height_scale).astype(np.float32))[:, None]
            dsm, seg = self.generator(x)
            heights.append(dsm[:, 0].double().numpy() * self.height_scale + shift)
            if seg is not None:
                logits.append(seg.double().numpy())
        return np.concatenate(heights), (np.concatenate(logits) if logits else None)


def validate(model, samples: list[SceneSample], batch_size: int = 16) -> Metrics:
    """RMSE/MAE in meters and mIoU of argmax labels over all sample pixels.

    ``model`` exposes ``predict(inputs)`` as :class:`NetworkPredictor` does.
    """
    sq = ab = 0.0
    n = 0
    cm = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
    have_seg = False
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        heights, logits = model.predict(np.stack([s.input for s in chunk]))
        for k, s in enumerate(chunk):
            d = heights[k].astype(np.float64) - s.target.astype(np.float64)
            sq += float(np.sum(d * d))
            ab += float(np.sum(np.abs(d)))
            n += d.size
            if logits is not None:
                have_seg = True
                cm += confusion_matrix(np.argmax(logits[k], axis=0), s.roof)
    if n == 0:
        raise ValueError("no validation samples")
    return Metrics(math.sqrt(sq / n), ab / n, miou_from_confusion(cm) if have_seg else None)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, bundle: NetworkBundle, weights: obj.WeightState, epoch: int, extra: dict | None = None):
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_spec": bundle.generator.spec.to_dict(),
        "weight_state": weights.to_dict(),
        "epoch": epoch,
        "generator": bundle.generator.state_dict(),
        "discriminator": bundle.discriminator.state_dict() if bundle.discriminator is not None else None,
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[NetworkBundle, obj.WeightState, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a dsmfilter checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    spec = ModelSpec.from_dict(payload["model_spec"])
    bundle = build_bundle(spec)
    bundle.generator.load_state_dict(payload["generator"])
    if bundle.discriminator is not None and payload["discriminator"] is not None:
        bundle.discriminator.load_state_dict(payload["discriminator"])
    weights = obj.WeightState.from_dict(payload["weight_state"])
    return bundle, weights, {"epoch": payload["epoch"], **payload.get("extra", {})}


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def _write_csv(path: Path, rows: list[dict]):
    if not rows:
        path.write_text("")
        return
    keys = list(rows[0])
    for row in rows[1:]:
        keys += [k for k in row if k not in keys]
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=keys)
        writer.writeheader()
        writer.writerows(rows)


def _generator_losses(config: TrainConfig, bundle: NetworkBundle, batch: dict, gsd: float):
    x = torch.from_numpy(batch["input"])
    y = torch.from_numpy(batch["target"])
    dsm, seg = bundle.generator(x)
    active = config.model.active_objectives
    # both height losses act on meters so their scales are commensurate with the metrics
    raw = {"l1": obj.l1_loss(dsm * config.height_scale, y * config.height_scale)}
    if "normal" in active:
        raw["normal"] = obj.normal_loss(dsm[:, 0], y[:, 0], gsd=gsd, height_scale=config.height_scale)
    if "seg" in active:
        raw["seg"] = obj.seg_loss(seg, torch.from_numpy(batch["roof"]))
    if "gan" in active:
        raw["gan"] = obj.gan_generator_loss(bundle.discriminator(x, dsm))
    return x, y, dsm, raw


def train(config: TrainConfig, train_area: SceneArea, val_samples: list[SceneSample], run_dir=None,
          progress: bool = False) -> TrainingRun:
    """Optimize a fresh model; the best validation-RMSE state is kept."""
    torch.manual_seed(config.seed)
    bundle = build_bundle(config.model)
    weights = config.initial_weights()
    gen_params = list(bundle.generator.parameters())
    s_params = [p for p in weights.parameters() if p.requires_grad]
    groups = [{"params": gen_params}]
    if s_params:
        groups.append({"params": s_params, "lr": config.weight_learning_rate or config.learning_rate})
    betas = (config.adam_beta1, config.adam_beta2)
    opt_g = torch.optim.Adam(groups, lr=config.learning_rate, betas=betas)
    opt_d = None
    if bundle.discriminator is not None:
        opt_d = torch.optim.Adam(bundle.discriminator.parameters(), lr=config.learning_rate, betas=betas)

    run = TrainingRun(config)
    if run_dir is not None:
        run.run_dir = Path(run_dir)
        (run.run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        (run.run_dir / "config.json").write_text(json.dumps(config.to_dict(), indent=2))
        (run.run_dir / "environment.json").write_text(json.dumps({
            "torch": torch.__version__, "numpy": np.__version__, "python": platform.python_version(),
            "threads": torch.get_num_threads(),
            "note": "bit-identical reruns assume the same platform and thread count",
        }, indent=2))

    step = 0
    gsd = train_area.gsd
    run.weight_trajectory.append({"step": 0, **{f"s_{k}": v for k, v in weights.values().items()}})
    for epoch in range(1, config.epochs + 1):
        samples = list(epoch_sampler(train_area, config.patch_size, config.max_shift, config.seed, epoch))
        bundle.generator.train()
        if bundle.discriminator is not None:
            bundle.discriminator.train()
        for i in range(0, len(samples), config.batch_size):
            batch = normalize_batch(samples[i:i + config.batch_size], config.height_scale)
            x, y, dsm, raw = _generator_losses(config, bundle, batch, gsd)
            report = obj.combine_multitask(raw, weights, config.model.active_objectives)
            if not torch.isfinite(report.total):
                raise DivergenceError(f"non-finite total loss at step {step + 1}", report.as_row())
            opt_g.zero_grad(set_to_none=True)
            report.total.backward()
            opt_g.step()
            step += 1
            row = {"step": step, "epoch": epoch, **report.as_row()}
            if opt_d is not None:
                opt_d.zero_grad(set_to_none=True)
                d_loss = obj.discriminator_loss(bundle.discriminator(x, y), bundle.discriminator(x, dsm.detach()))
                d_loss.backward()
                opt_d.step()
                row["loss_discriminator"] = float(d_loss.detach())
            run.step_log.append(row)
            run.weight_trajectory.append({"step": step, **{f"s_{k}": v for k, v in weights.values().items()}})

        if epoch % config.validate_every and epoch != config.epochs:
            continue
        metrics = validate(NetworkPredictor(bundle.generator), val_samples)
        run.epoch_metrics.append({"epoch": epoch, "step": step, "rmse": metrics.rmse, "mae": metrics.mae,
                                  "miou": metrics.miou if metrics.miou is not None else ""})
        if progress:
            logger.info("epoch %d rmse %.4f mae %.4f", epoch, metrics.rmse, metrics.mae)
        if metrics.rmse < run.best_rmse:
            run.best_rmse, run.best_epoch = metrics.rmse, epoch
            run.best_state = {
                "generator": copy.deepcopy(bundle.generator.state_dict()),
                "weights": weights.to_dict(),
                "epoch": epoch,
            }
            if run.run_dir is not None:
                path = run.run_dir / "checkpoints" / f"epoch_{epoch:03d}.pt"
                save_checkpoint(path, bundle, weights, epoch, {"val_rmse": metrics.rmse})
                run.checkpoints.append(str(path))
                (run.run_dir / "best.json").write_text(json.dumps(
                    {"epoch": epoch, "checkpoint": path.name, "val_rmse": metrics.rmse}, indent=2))

    if run.run_dir is not None:
        write_run_logs(run)
    return run


def write_run_logs(run: TrainingRun):
    d = run.run_dir
    _write_csv(d / "steps.csv", run.step_log)
    _write_csv(d / "epochs.csv", run.epoch_metrics)
    _write_csv(d / "weights.csv", run.weight_trajectory)


def best_generator(run: TrainingRun) -> Generator:
    """Generator restored to the best validation epoch."""
    gen = Generator(run.config.model)
    gen.load_state_dict(run.best_state["generator"])
    gen.eval()
    return gen


# ---------------------------------------------------------------------------
# Ablation
# ---------------------------------------------------------------------------


def ablation_configs(base: TrainConfig) -> list[tuple[str, TrainConfig]]:
    out = []
    for objectives, weighting in ABLATION_ROWS:
        model = copy.deepcopy(base.model)
        model.active_objectives = tuple(objectives)
        if "seg" not in objectives:
            model.seg_decoder = None
        elif model.seg_decoder is None:
            model.seg_decoder = "deeplab"
        model.validate()
        cfg = copy.deepcopy(base)
        cfg.model = model
        cfg.weighting = "fixed" if weighting == "none" else weighting
        name = "+".join(objectives) + f"/{weighting}"
        out.append((name, cfg))
    return out


def run_ablation(base: TrainConfig, train_area: SceneArea, val_samples: list[SceneSample], out_dir=None) -> list[dict]:
    """Train the five objective/weighting configurations and tabulate them."""
    input_rmse = validate(PassThrough(), val_samples).rmse
    table = []
    for (objectives, weighting), (name, cfg) in zip(ABLATION_ROWS, ablation_configs(base)):
        run_dir = None if out_dir is None else Path(out_dir) / name.replace("+", "_").replace("/", "__")
        run = train(cfg, train_area, val_samples, run_dir)
        table.append({
            "objectives": "+".join(objectives),
            "weighting": weighting,
            "best_epoch": run.best_epoch,
            "best_rmse": run.best_rmse,
            "input_rmse": input_rmse,
            "run": run,
        })
    if out_dir is not None:
        _write_csv(Path(out_dir) / "ablation.csv", [{k: v for k, v in r.items() if k != "run"} for r in table])
    return table


class PassThrough:
    """Predictor returning its input unchanged."""

    has_seg = False

    def predict(self, inputs):
        return np.asarray(inputs, dtype=np.float64), None
