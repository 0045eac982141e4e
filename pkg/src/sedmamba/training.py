"""Supervised training: BCE objective, AdamW, epoch loop and checkpoints.

Checkpoint file layout (little-endian)::

    b"SEDC" | version u32 | header length u64 | JSON header | tensor payload | CRC32 u32

The JSON header holds the model and training configs, epoch, seed, the
latest metrics and a tensor directory (group, name, shape, byte offset into
the payload). Tensors are stored as float64. The CRC covers header and
payload.
"""

from __future__ import annotations

import json
import logging
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import LabeledSequence
from .errors import ConfigError, DataError, DimensionError, NumericError
from .metrics import MetricsReport, stratified_eval
from .model import ModelConfig, SEDMamba
from .tensor import Tensor

log = logging.getLogger(__name__)

EPS = 1e-7


def bce_loss(P: Tensor, y) -> Tensor:
    """Mean binary cross-entropy; probabilities are clamped to [EPS, 1 - EPS]."""
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if P.size != y.size:
        raise DimensionError(f"bce_loss: {P.size} predictions vs {y.size} labels")
    p = T.clamp(T.reshape(P, (y.size,)), EPS, 1.0 - EPS)
    pos = T.mul(T.log(p), y)
    neg = T.mul(T.log(T.add(T.neg(p), 1.0)), 1.0 - y)
    return T.neg(T.mean(T.add(pos, neg)))


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    epochs: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    seed: int = 0
    checkpoint_every: int = 10  # epochs; 0 disables periodic checkpoints
    target_auc: float | None = None  # stop once validation frame AUC reaches this

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("learning rate must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")
        if self.weight_decay < 0 or self.eps <= 0 or self.checkpoint_every < 0:
            raise ConfigError("weight_decay >= 0, eps > 0 and checkpoint_every >= 0 required")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(params: dict[str, Tensor], state: OptimizerState, cfg: TrainConfig,
               grads: dict[str, np.ndarray] | None = None):
    """One AdamW update in place, with decoupled weight decay.

    Gradients default to each parameter's ``.grad``; a missing gradient is
    treated as zero. Nothing is modified if any gradient is non-finite.
    """
    if grads is None:
        grads = {k: p.grad for k, p in params.items()}
    for k, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError(f"adamw_step: non-finite gradient for {k}")
    state.step += 1
    t = state.step
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.setdefault(k, np.zeros_like(p.data))
        v = state.v.setdefault(k, np.zeros_like(p.data))
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        p.data *= 1.0 - cfg.lr * cfg.weight_decay
        p.data -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"SEDC"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: dict[str, np.ndarray]
    optimizer: OptimizerState
    epoch: int
    seed: int
    train_config: TrainConfig | None = None
    metrics: dict = field(default_factory=dict)


def save_checkpoint(path, ckpt: Checkpoint):
    directory, chunks, offset = [], [], 0
    groups = (("param", ckpt.params), ("m", ckpt.optimizer.m), ("v", ckpt.optimizer.v))
    for group, tensors in groups:
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f8")
            raw = arr.tobytes()
            directory.append({"group": group, "name": name, "shape": list(arr.shape),
                              "offset": offset, "nbytes": len(raw)})
            chunks.append(raw)
            offset += len(raw)
    header = {
        "model_config": ckpt.model_config.to_dict(),
        "train_config": asdict(ckpt.train_config) if ckpt.train_config else None,
        "epoch": ckpt.epoch,
        "seed": ckpt.seed,
        "optimizer_step": ckpt.optimizer.step,
        "metrics": ckpt.metrics,
        "dtype": "<f8",
        "tensors": directory,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    payload = b"".join(chunks)
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<IQ", CKPT_VERSION, len(hbytes)))
        fh.write(hbytes)
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload, zlib.crc32(hbytes))))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if len(raw) < 16 or raw[:4] != CKPT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", raw, 4)
    if version != CKPT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    if len(raw) < 20 + hlen:
        raise DataError(f"{path}: truncated checkpoint")
    hbytes = raw[16:16 + hlen]
    payload = raw[16 + hlen:-4]
    (crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(payload, zlib.crc32(hbytes)) != crc:
        raise DataError(f"{path}: checksum mismatch")
    header = json.loads(hbytes)
    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "m": {}, "v": {}}
    for entry in header["tensors"]:
        buf = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        groups[entry["group"]][entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(entry["shape"]).copy()
    tc = header.get("train_config")
    return Checkpoint(
        model_config=ModelConfig.from_dict(header["model_config"]),
        params=groups["param"],
        optimizer=OptimizerState(groups["m"], groups["v"], header["optimizer_step"]),
        epoch=header["epoch"],
        seed=header["seed"],
        train_config=TrainConfig.from_dict(tc) if tc else None,
        metrics=header.get("metrics", {}),
    )


def model_from_checkpoint(ckpt: Checkpoint) -> SEDMamba:
    model = SEDMamba(ckpt.model_config, seed=ckpt.seed)
    model.load_state_dict(ckpt.params)
    return model


# ---------------------------------------------------------------------------
# evaluation helpers and the training loop
# ---------------------------------------------------------------------------

def predict_dataset(model: SEDMamba, dataset: Sequence[LabeledSequence], workers: int = 1) -> list[np.ndarray]:
    if workers <= 1:
        return [model.predict(s.embeddings.matrix) for s in dataset]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda s: model.predict(s.embeddings.matrix), dataset))


def evaluate(model: SEDMamba, dataset: Sequence[LabeledSequence], workers: int = 1,
             boundary_seconds: float = 3.0) -> tuple[MetricsReport, list]:
    probs = predict_dataset(model, dataset, workers)
    rate = dataset[0].embeddings.sample_rate
    report = stratified_eval([s.labels for s in dataset], probs, sample_rate=rate,
                             boundary_seconds=boundary_seconds)
    return report, probs


@dataclass
class TrainResult:
    model: SEDMamba
    checkpoint: Checkpoint
    history: list[dict]
    best: dict | None


def train_run(train_set: Sequence[LabeledSequence], model_cfg: ModelConfig, cfg: TrainConfig,
              val_set: Sequence[LabeledSequence] | None = None, out_dir=None,
              resume: Checkpoint | None = None,
              on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Train on whole sequences, one optimisation step per sequence.

    Sequence order is reshuffled every epoch from ``(seed, epoch)`` so a run
    resumed from a checkpoint replays exactly the same updates. When
    ``out_dir`` is given, ``epochs.jsonl``, ``last.sedc`` and ``best.sedc``
    are written there.
    """
    if not train_set:
        raise DataError("training set is empty")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    if resume is not None:
        model = model_from_checkpoint(resume)
        opt = OptimizerState({k: v.copy() for k, v in resume.optimizer.m.items()},
                             {k: v.copy() for k, v in resume.optimizer.v.items()}, resume.optimizer.step)
        start = resume.epoch
        history = list(resume.metrics.get("history", []))
    else:
        model = SEDMamba(model_cfg, seed=cfg.seed)
        opt = OptimizerState()
        start = 0
        history = []
    best = max((h for h in history if h.get("val_auc") is not None), key=lambda h: h["val_auc"], default=None)
    if out is not None:
        # the log always mirrors the history this run continues from
        (out / "epochs.jsonl").write_text("".join(json.dumps(h, sort_keys=True) + "\n" for h in history))

    def snapshot(epoch):
        return Checkpoint(model.config, model.state_dict(),
                          OptimizerState({k: v.copy() for k, v in opt.m.items()},
                                         {k: v.copy() for k, v in opt.v.items()}, opt.step),
                          epoch, cfg.seed, cfg, {"history": history, "best": best})

    epoch = start
    for epoch in range(start + 1, cfg.epochs + 1):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_set))
        losses = []
        for i in order:
            seq = train_set[i]
            model.zero_grad()
            try:
                loss = bce_loss(model(seq.embeddings.matrix), seq.labels)
                loss.backward()
                adamw_step(model.params, opt, cfg)
            except NumericError as err:
                raise NumericError(f"epoch {epoch}, sequence {seq.video_id}: {err}") from err
            losses.append(loss.item())
        entry = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_auc": None, "val_ap": None}
        if val_set:
            report, _ = evaluate(model, val_set)
            entry["val_auc"], entry["val_ap"] = report.frame_auc, report.frame_ap
        history.append(entry)
        log.info("epoch %d loss %.5f val_auc %s", epoch, entry["train_loss"], entry["val_auc"])
        if on_epoch is not None:
            on_epoch(entry)

        improved = entry["val_auc"] is not None and (best is None or entry["val_auc"] > best["val_auc"])
        if improved:
            best = entry
        if out is not None:
            with open(out / "epochs.jsonl", "a") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
            if improved:
                save_checkpoint(out / "best.sedc", snapshot(epoch))
            if cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
                save_checkpoint(out / f"epoch_{epoch:04d}.sedc", snapshot(epoch))
        if cfg.target_auc is not None and entry["val_auc"] is not None and entry["val_auc"] >= cfg.target_auc:
            break

    final = snapshot(epoch)
    if out is not None:
        save_checkpoint(out / "last.sedc", final)
    return TrainResult(model, final, history, best)
