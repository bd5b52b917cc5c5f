"""Training, evaluation, metrics, optimizer and checkpoints.

The full model is a bundle of three trainable parts (guidance extractor,
noise predictor, refiner) plus a frozen noise schedule.  Training mixes
two objectives: the standard noise-matching loss on diffused latents,
plus a metric-space loss on refined depth computed every few steps.

The clean-latent target bootstraps itself: in the first epoch it is the
nearest-valid densification of the sparse input, and from the second
epoch on it is the model's own sampled completion, refreshed once per
epoch per sample and treated as a constant (gradients never flow into
it).  The refiner trains against the same cached completion, so no
reverse-chain sampling happens inside the step loop.
"""

from __future__ import annotations

import json
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import (DepthMap, Manifest, SceneSample, iterate, load_sample,
                   nearest_valid_fill)
from .denoiser import Denoiser, DenoiserConfig
from .diffusion import (NoiseSchedule, build_schedule, diffusion_loss,
                        forward_diffuse, normalize_depth)
from .diffusion import sample as diffusion_sample
from .errors import ConfigError, DataError, DimensionError, FormatError, NumericError
from .guidance import GuidanceConfig, GuidanceExtractor
from .nn import Module
from .refiner import Refiner, RefineConfig
from .rng import stream, stream_key
from .tensor import Tensor


# ---------------------------------------------------------------------------
# metrics

@dataclass(frozen=True)
class Metrics:
    rmse_mm: float
    mae_mm: float
    irmse_per_km: float
    imae_per_km: float
    n_valid: int


def _inverse_errors(pred: DepthMap, gt: DepthMap) -> np.ndarray:
    """1/pred - 1/gt in 1/m over gt-valid pixels; rejects non-positive depth."""
    mask = gt.valid
    for name, dm in (("prediction", pred), ("ground truth", gt)):
        bad = mask & (dm.meters <= 0.0)
        if bad.any():
            y, x = np.argwhere(bad)[0]
            raise NumericError(
                f"inverse metrics need positive depth, {name} is "
                f"{dm.meters[y, x]:g} m at pixel (y={y}, x={x})")
    return 1.0 / pred.meters[mask] - 1.0 / gt.meters[mask]


def compute_metrics(pred: DepthMap, gt: DepthMap) -> Metrics:
    """Error metrics over gt-valid pixels: mm for depth, 1/km for inverse."""
    if (pred.height, pred.width) != (gt.height, gt.width):
        raise DimensionError(
            f"metrics: pred {pred.height}x{pred.width} vs gt {gt.height}x{gt.width}")
    if gt.n_valid == 0:
        raise DataError("metrics: ground truth has no valid pixels")
    err = pred.meters[gt.valid] - gt.meters[gt.valid]
    ierr = _inverse_errors(pred, gt)
    return Metrics(
        rmse_mm=1000.0 * float(np.sqrt(np.mean(err ** 2))),
        mae_mm=1000.0 * float(np.mean(np.abs(err))),
        irmse_per_km=1000.0 * float(np.sqrt(np.mean(ierr ** 2))),
        imae_per_km=1000.0 * float(np.mean(np.abs(ierr))),
        n_valid=int(gt.n_valid),
    )


def aggregate_metrics(reports: list[Metrics]) -> Metrics:
    """Unweighted mean of per-sample metrics; n_valid sums (it is a count)."""
    if not reports:
        raise DataError("metrics: nothing to aggregate")
    n = len(reports)
    return Metrics(
        rmse_mm=sum(m.rmse_mm for m in reports) / n,
        mae_mm=sum(m.mae_mm for m in reports) / n,
        irmse_per_km=sum(m.irmse_per_km for m in reports) / n,
        imae_per_km=sum(m.imae_per_km for m in reports) / n,
        n_valid=sum(m.n_valid for m in reports),
    )


def write_metrics_csv(path: Path | str, results: list[tuple[str, Metrics]],
                      overall: Metrics | None = None) -> None:
    """Per-sample rows plus an optional pooled row; floats use repr so the
    file round-trips losslessly."""
    lines = ["rmse_mm,mae_mm,irmse_per_km,imae_per_km,n_valid,id"]
    rows = list(results)
    if overall is not None:
        rows.append(("(overall)", overall))
    for sid, m in rows:
        lines.append(f"{m.rmse_mm!r},{m.mae_mm!r},{m.irmse_per_km!r},"
                     f"{m.imae_per_km!r},{m.n_valid},{sid}")
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# losses and schedule

def map_loss(pred_meters: Tensor, gt: DepthMap) -> Tensor:
    """Mean over gt-valid pixels of |err| + err^2, in meters."""
    if pred_meters.shape != (gt.height, gt.width):
        raise DimensionError(
            f"map_loss: pred {pred_meters.shape} vs gt {gt.height}x{gt.width}")
    if gt.n_valid == 0:
        raise DataError("map_loss: ground truth has no valid pixels")
    mask = gt.valid.astype(np.float64)
    err = pred_meters * Tensor(mask) - Tensor(gt.meters)  # gt is zero where invalid
    return (err.abs().sum() + (err * err).sum()) * (1.0 / gt.n_valid)


def lr_at(epoch: int, lr0: float = 1e-3, step_frac: float = 1.0) -> float:
    """Piecewise schedule: linear warmup across epoch 1, then staged decay."""
    if epoch < 1:
        raise ConfigError(f"epoch counts from 1, got {epoch}")
    if epoch == 1:
        return lr0 * step_frac
    if epoch <= 9:
        return lr0
    if epoch <= 14:
        return 0.2 * lr0
    return 0.04 * lr0


class AdamW:
    """Adam with decoupled weight decay; lr is passed per step."""

    def __init__(self, named_params, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = list(named_params)
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self._m = {name: np.zeros_like(p.data) for name, p in self.params}
        self._v = {name: np.zeros_like(p.data) for name, p in self.params}
        self._t = {name: 0 for name, _ in self.params}

    def step(self, lr: float) -> None:
        b1, b2 = self.betas
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            t = self._t[name] = self._t[name] + 1
            p.data *= 1.0 - lr * self.weight_decay
            m = self._m[name]
            v = self._v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            m_hat = m / (1.0 - b1 ** t)
            v_hat = v / (1.0 - b2 ** t)
            p.data -= lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.zero_grad()


# ---------------------------------------------------------------------------
# model bundle

@dataclass
class ModelConfig:
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    t_train: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    d_max: float = 10.0

    def validate(self) -> None:
        self.guidance.validate()
        self.denoiser.validate()
        self.refine.validate()
        if self.guidance.guidance_channels != self.denoiser.cond_channels:
            raise ConfigError(
                f"guidance emits {self.guidance.guidance_channels} channels but the "
                f"denoiser expects {self.denoiser.cond_channels}")
        if self.guidance.d_max != self.d_max:
            raise ConfigError(
                f"d_max mismatch: model {self.d_max} vs guidance {self.guidance.d_max}")
        if self.t_train < 2:
            raise ConfigError(f"t_train must be >= 2, got {self.t_train}")

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        refine = dict(d["refine"])
        refine["kernels"] = tuple(refine["kernels"])
        return ModelConfig(
            guidance=GuidanceConfig(**d["guidance"]),
            denoiser=DenoiserConfig(**d["denoiser"]),
            refine=RefineConfig(**refine),
            t_train=d["t_train"], beta_start=d["beta_start"],
            beta_end=d["beta_end"], d_max=d["d_max"],
        )


class CompletionModel(Module):
    """Guidance extractor + conditional denoiser + refiner + schedule."""

    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0):
        cfg = cfg or ModelConfig()
        cfg.validate()
        self.cfg = cfg
        self.schedule = build_schedule(cfg.t_train, cfg.beta_start, cfg.beta_end)
        self.guidance = GuidanceExtractor(cfg.guidance, seed=seed)
        self.denoiser = Denoiser(cfg.denoiser, seed=seed)
        self.refiner = Refiner(cfg.guidance.guidance_channels, cfg.refine, seed=seed)

    def complete(self, image: np.ndarray, sparse: DepthMap, *, steps: int = 20,
                 eta: float = 0.0, seed: int = 0, use_refiner: bool = True) -> DepthMap:
        """Dense depth from an image and sparse measurements."""
        with T.no_grad():
            cond = self.guidance(image, sparse).guidance
            dense = diffusion_sample(self.denoiser, cond, steps, seed,
                                     self.schedule, self.cfg.d_max, eta=eta)
            if use_refiner:
                dense = self.refiner.refine(dense, cond, sparse)
        return dense

    forward = complete


# ---------------------------------------------------------------------------
# checkpoints

_CKPT_MAGIC = b"DFCKPT\x00"
_CKPT_VERSION = 1


def save_checkpoint(path: Path | str, state: dict[str, np.ndarray], meta: dict) -> None:
    """Single-file binary: magic, version, JSON index, little-endian payload.

    Tensors are stored sorted by name in C order, so the same state always
    produces byte-identical files.
    """
    tensors = []
    chunks = []
    offset = 0
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name])
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        tensors.append({"name": name, "dtype": le.dtype.str,
                        "shape": list(arr.shape), "offset": offset,
                        "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "tensors": tensors},
                        sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<HQ", _CKPT_VERSION, len(header)))
        f.write(header)
        for raw in chunks:
            f.write(raw)


def load_checkpoint(path: Path | str) -> tuple[dict[str, np.ndarray], dict]:
    blob = Path(path).read_bytes()
    fixed = len(_CKPT_MAGIC) + struct.calcsize("<HQ")
    if len(blob) < fixed or blob[:len(_CKPT_MAGIC)] != _CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<HQ", blob, len(_CKPT_MAGIC))
    if version != _CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    if len(blob) < fixed + hlen:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(blob[fixed:fixed + hlen].decode())
        tensors = header["tensors"]
        meta = header["meta"]
    except (ValueError, KeyError) as e:
        raise FormatError(f"{path}: bad checkpoint header: {e}") from None
    payload = blob[fixed + hlen:]
    state: dict[str, np.ndarray] = {}
    for rec in tensors:
        end = rec["offset"] + rec["nbytes"]
        if end > len(payload):
            raise FormatError(f"{path}: truncated tensor '{rec['name']}'")
        arr = np.frombuffer(payload[rec["offset"]:end], dtype=np.dtype(rec["dtype"]))
        state[rec["name"]] = arr.reshape(rec["shape"]).copy()
    return state, meta


def save_model(path: Path | str, model: CompletionModel, extra: dict | None = None) -> None:
    meta = {"kind": "completion-model", "config": asdict(model.cfg)}
    if extra:
        meta.update(extra)
    save_checkpoint(path, model.state_dict(), meta)


def load_model(path: Path | str) -> tuple[CompletionModel, dict]:
    state, meta = load_checkpoint(path)
    if meta.get("kind") != "completion-model":
        raise FormatError(f"{path}: checkpoint is not a completion model")
    model = CompletionModel(ModelConfig.from_dict(meta["config"]), seed=0)
    model.load_state_dict(state)
    return model, meta


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainConfig:
    epochs: int = 5
    batch_size: int = 4
    lr0: float = 1e-3
    weight_decay: float = 0.01
    gamma_diff: float = 1.0
    gamma_map: float = 1.0
    map_every: int = 4
    sample_steps: int = 20  # reverse-chain length for the per-epoch refresh
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.map_every < 1:
            raise ConfigError(f"map_every must be >= 1, got {self.map_every}")
        if self.lr0 <= 0:
            raise ConfigError(f"lr0 must be positive, got {self.lr0}")
        if self.gamma_diff < 0 or self.gamma_map < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.sample_steps < 1:
            raise ConfigError(f"sample_steps must be >= 1, got {self.sample_steps}")


@dataclass
class EpochStats:
    epoch: int
    diff_loss: float
    map_loss: float | None
    lr: float
    seconds: float


def _mean(parts: list[Tensor]) -> Tensor:
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    return total * (1.0 / len(parts))


def _refresh_targets(model: CompletionModel, manifest: Manifest, cfg: TrainConfig,
                     epoch: int, z_cache: dict, d_cache: dict) -> None:
    """Re-sample every training target with the current weights (no grads).

    The diffusion target z0 is the model's completed output (sample then
    refine): anchoring the target to the sparse measurements keeps the
    self-supervised loop grounded instead of chasing its own raw samples.
    The refinement input cache stays the raw sample, which is exactly what
    the refiner receives at inference time.
    """
    for entry in manifest.entries:
        s = load_sample(manifest, entry)
        with T.no_grad():
            cond = model.guidance(s.image, s.sparse).guidance
            raw = diffusion_sample(
                model.denoiser, cond, cfg.sample_steps,
                stream_key(cfg.seed, "refresh", epoch, s.id),
                model.schedule, model.cfg.d_max, eta=0.0)
            refined = model.refiner.refine(raw, cond, s.sparse)
        z_cache[s.id] = normalize_depth(refined.meters, model.cfg.d_max)
        d_cache[s.id] = raw.meters.copy()


def _bootstrap_target(s: SceneSample, model: CompletionModel,
                      z_cache: dict, d_cache: dict) -> None:
    """First-epoch target: nearest-valid densification of the sparse input."""
    dense = nearest_valid_fill(s.sparse)
    z_cache[s.id] = normalize_depth(dense.meters, model.cfg.d_max)
    d_cache[s.id] = dense.meters.copy()


def train(model: CompletionModel, manifest: Manifest, cfg: TrainConfig | None = None,
          *, checkpoint_dir: Path | str | None = None, log=None) -> list[EpochStats]:
    """Run the full loop; returns per-epoch stats in order."""
    cfg = cfg or TrainConfig()
    cfg.validate()
    steps_per_epoch = math.ceil(len(manifest) / cfg.batch_size)
    opt = AdamW(list(model.named_parameters()), weight_decay=cfg.weight_decay)
    z_cache: dict[str, np.ndarray] = {}
    d_cache: dict[str, np.ndarray] = {}
    history: list[EpochStats] = []
    for epoch in range(1, cfg.epochs + 1):
        started = time.monotonic()
        if epoch > 1:
            _refresh_targets(model, manifest, cfg, epoch, z_cache, d_cache)
        diff_sum = 0.0
        map_sum = 0.0
        map_n = 0
        lr = 0.0
        order_seed = stream_key(cfg.seed, "order", epoch)
        for step, batch in enumerate(iterate(manifest, cfg.batch_size, order_seed)):
            try:
                t = int(stream(cfg.seed, "t", epoch, step).integers(model.cfg.t_train))
                conds = []
                noisy = []
                eps_true = []
                for s in batch:
                    if s.id not in z_cache:
                        _bootstrap_target(s, model, z_cache, d_cache)
                    conds.append(model.guidance(s.image, s.sparse).guidance)
                    eps = stream(cfg.seed, "noise", epoch, step, s.id) \
                        .standard_normal(z_cache[s.id].shape)
                    noisy.append(forward_diffuse(z_cache[s.id], t, eps, model.schedule))
                    eps_true.append(eps)
                z_t = Tensor(np.stack(noisy)[:, None])
                cond_batch = T.concat([c.reshape(1, *c.shape) for c in conds], axis=0)
                eps_hat = model.denoiser.predict_noise(z_t, t, cond_batch)
                l_diff = diffusion_loss(eps_hat, np.stack(eps_true)[:, None])
                total = l_diff * cfg.gamma_diff
                l_map_item = None
                if cfg.gamma_map > 0.0 and step % cfg.map_every == 0:
                    per_sample = []
                    for s, cond in zip(batch, conds):
                        refined = model.refiner.refine_tensor(
                            Tensor(d_cache[s.id]), cond, s.sparse)
                        per_sample.append(map_loss(refined, s.dense_gt))
                    l_map = _mean(per_sample)
                    total = total + l_map * cfg.gamma_map
                    l_map_item = l_map.item()
                diff_sum += l_diff.item()
                model.zero_grad()
                total.backward()
                total.free_graph()
                frac = (step + 1) / steps_per_epoch
                lr = lr_at(epoch, cfg.lr0, step_frac=frac if epoch == 1 else 1.0)
                opt.step(lr)
            except NumericError as e:
                ids = ",".join(s.id for s in batch)
                raise NumericError(
                    f"training diverged at epoch {epoch} step {step} "
                    f"(t={t}, batch=[{ids}]): {e}") from e
            if l_map_item is not None:
                map_sum += l_map_item
                map_n += 1
        stats = EpochStats(
            epoch=epoch,
            diff_loss=diff_sum / steps_per_epoch,
            map_loss=(map_sum / map_n) if map_n else None,
            lr=lr,
            seconds=time.monotonic() - started,
        )
        history.append(stats)
        if log is not None:
            log(stats)
        if checkpoint_dir is not None:
            ckpt_dir = Path(checkpoint_dir)
            ckpt_dir.mkdir(parents=True, exist_ok=True)
            save_model(ckpt_dir / f"epoch{epoch:03d}.ckpt", model,
                       extra={"epoch": epoch, "diff_loss": stats.diff_loss,
                              "map_loss": stats.map_loss})
    return history


# ---------------------------------------------------------------------------
# evaluation

def evaluate(model: CompletionModel, manifest: Manifest, *, steps: int = 20,
             eta: float = 0.0, seed: int = 0, use_refiner: bool = True,
             log=None) -> tuple[list[tuple[str, Metrics]], Metrics]:
    """Complete every manifest sample and score it; returns the per-sample
    table plus the mean-per-metric aggregate."""
    results: list[tuple[str, Metrics]] = []
    for entry in manifest.entries:
        s = load_sample(manifest, entry)
        pred = model.complete(s.image, s.sparse, steps=steps, eta=eta,
                              seed=stream_key(seed, "eval", s.id),
                              use_refiner=use_refiner)
        m = compute_metrics(pred, s.dense_gt)
        results.append((s.id, m))
        if log is not None:
            log(s.id, m)
    return results, aggregate_metrics([m for _, m in results])
