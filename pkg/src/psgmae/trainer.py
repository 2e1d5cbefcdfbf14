"""Deterministic training loop: data wiring, Adam updates, early stopping,
metrics logging, and binary checkpoints.

Randomness is split into three Philox streams spawned from the config seed:
stream 0 initializes parameters, stream 1 shuffles examples each epoch,
stream 2 draws mask plans. Stream states are checkpointed, so a resumed run
reproduces an uninterrupted one step for step.

Checkpoint layout (little-endian), magic ``PSGMAE01``:

    u32 length + config INI text (UTF-8)
    u32 length + meta JSON (epoch, best val loss, patience, rng states, ...)
    4 named blob sections: params, best_params, adam_m, adam_v, each
        u32 count, then per tensor: u16 name length + name, u8 ndim,
        ndim x u32 dims, float32 data
"""

from __future__ import annotations

import configparser
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import mae, numcore as nc
from .mae import MaeConfig, MaeParams
from .pipeline import DatasetManifest, EpochRecord, load_manifest, read_epoch_cache

CHECKPOINT_MAGIC = b"PSGMAE01"

MANIFEST_FILENAME = "manifest.json"
CACHE_FILENAME = "epochs.psgepo"


class TrainerError(Exception):
    pass


class EmptySplit(TrainerError):
    pass


class NonFiniteLoss(TrainerError):
    pass


class BadMagic(TrainerError):
    pass


class ShapeMismatchOnLoad(TrainerError):
    pass


@dataclass
class TrainConfig:
    mae: MaeConfig
    input_channel: str
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 64
    max_epochs: int = 100
    seed: int = 0
    patience: int = 10
    calibrate_scale: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if not self.input_channel:
            raise ValueError("input_channel is required")
        if self.input_channel in self.mae.target_channels:
            raise ValueError("input channel cannot be one of its own targets")


def config_to_ini(config: TrainConfig) -> str:
    parser = configparser.ConfigParser()
    parser["mae"] = {
        "patch_size": str(config.mae.patch_size),
        "seq_len": str(config.mae.seq_len),
        "embed_dim": str(config.mae.embed_dim),
        "num_heads": str(config.mae.num_heads),
        "encoder_layers": str(config.mae.encoder_layers),
        "decoder_layers": str(config.mae.decoder_layers),
        "mlp_ratio": str(config.mae.mlp_ratio),
        "mask_ratio": repr(config.mae.mask_ratio),
        "loss_scope": config.mae.loss_scope,
        "target_channels": ", ".join(config.mae.target_channels),
    }
    parser["optimizer"] = {
        "lr": repr(config.lr),
        "beta1": repr(config.beta1),
        "beta2": repr(config.beta2),
        "epsilon": repr(config.epsilon),
    }
    parser["train"] = {
        "input_channel": config.input_channel,
        "batch_size": str(config.batch_size),
        "max_epochs": str(config.max_epochs),
        "seed": str(config.seed),
        "patience": str(config.patience),
        "calibrate_scale": "true" if config.calibrate_scale else "false",
    }
    out = io.StringIO()
    parser.write(out)
    return out.getvalue()


def config_from_ini(text: str) -> TrainConfig:
    parser = configparser.ConfigParser()
    parser.read_string(text)
    m = parser["mae"]
    mae_config = MaeConfig(
        patch_size=m.getint("patch_size", 100),
        seq_len=m.getint("seq_len", 30),
        embed_dim=m.getint("embed_dim", 64),
        num_heads=m.getint("num_heads", 4),
        encoder_layers=m.getint("encoder_layers", 2),
        decoder_layers=m.getint("decoder_layers", 1),
        mlp_ratio=m.getint("mlp_ratio", 4),
        mask_ratio=m.getfloat("mask_ratio", 0.5),
        loss_scope=m.get("loss_scope", "all"),
        target_channels=tuple(
            s.strip() for s in m.get("target_channels", "").split(",") if s.strip()
        ),
    )
    o = parser["optimizer"] if parser.has_section("optimizer") else {}
    t = parser["train"]
    return TrainConfig(
        mae=mae_config,
        input_channel=t.get("input_channel", ""),
        lr=float(o.get("lr", 1e-3)),
        beta1=float(o.get("beta1", 0.9)),
        beta2=float(o.get("beta2", 0.999)),
        epsilon=float(o.get("epsilon", 1e-8)),
        batch_size=t.getint("batch_size", 64),
        max_epochs=t.getint("max_epochs", 100),
        seed=t.getint("seed", 0),
        patience=t.getint("patience", 10),
        calibrate_scale=t.getboolean("calibrate_scale", True),
    )


@dataclass
class Checkpoint:
    """Everything needed to evaluate (best_params) or resume (the rest)."""

    config_text: str
    epoch: int
    params: dict[str, np.ndarray]
    best_params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    adam_step: int
    best_val_loss: float
    patience_left: int
    rng_shuffle: dict
    rng_mask: dict
    calibrated: bool = False

    def train_config(self) -> TrainConfig:
        return config_from_ini(self.config_text)


def _philox_state(gen: np.random.Generator) -> dict:
    state = gen.bit_generator.state
    return {
        "counter": [int(x) for x in state["state"]["counter"]],
        "key": [int(x) for x in state["state"]["key"]],
        "buffer": [int(x) for x in state["buffer"]],
        "buffer_pos": int(state["buffer_pos"]),
        "has_uint32": int(state["has_uint32"]),
        "uinteger": int(state["uinteger"]),
    }


def _restore_philox(payload: dict) -> np.random.Generator:
    bit = np.random.Philox()
    bit.state = {
        "bit_generator": "Philox",
        "state": {
            "counter": np.array(payload["counter"], dtype=np.uint64),
            "key": np.array(payload["key"], dtype=np.uint64),
        },
        "buffer": np.array(payload["buffer"], dtype=np.uint64),
        "buffer_pos": int(payload["buffer_pos"]),
        "has_uint32": int(payload["has_uint32"]),
        "uinteger": int(payload["uinteger"]),
    }
    return np.random.Generator(bit)


def _write_section(out: bytearray, blobs: dict[str, np.ndarray]) -> None:
    out += struct.pack("<I", len(blobs))
    for name, arr in blobs.items():
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", arr.ndim)
        for dim in arr.shape:
            out += struct.pack("<I", dim)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()


def save_checkpoint(checkpoint: Checkpoint) -> bytes:
    """Serialize to bytes; refuses to store non-finite values."""
    for section in (checkpoint.params, checkpoint.best_params,
                    checkpoint.adam_m, checkpoint.adam_v):
        for name, arr in section.items():
            if not np.isfinite(arr).all():
                raise nc.NonFiniteValue(f"non-finite values in blob {name!r}")
    meta = {
        "epoch": checkpoint.epoch,
        "adam_step": checkpoint.adam_step,
        "best_val_loss": checkpoint.best_val_loss,
        "patience_left": checkpoint.patience_left,
        "rng_shuffle": checkpoint.rng_shuffle,
        "rng_mask": checkpoint.rng_mask,
        "calibrated": checkpoint.calibrated,
    }
    out = bytearray(CHECKPOINT_MAGIC)
    for text in (checkpoint.config_text, json.dumps(meta, sort_keys=True)):
        raw = text.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw
    for section in (checkpoint.params, checkpoint.best_params,
                    checkpoint.adam_m, checkpoint.adam_v):
        _write_section(out, section)
    return bytes(out)


def load_checkpoint(data: bytes) -> Checkpoint:
    """Inverse of save_checkpoint; raises BadMagic/ShapeMismatchOnLoad on
    anything that is not a well-formed checkpoint stream."""
    if len(data) < 8 or data[:8] != CHECKPOINT_MAGIC:
        raise BadMagic(f"not a checkpoint stream (magic {data[:8]!r})")
    pos = 8

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise ShapeMismatchOnLoad("checkpoint stream truncated")
        values = struct.unpack_from(fmt, data, pos)
        pos += size
        return values

    def take_bytes(size: int) -> bytes:
        nonlocal pos
        if pos + size > len(data):
            raise ShapeMismatchOnLoad("checkpoint stream truncated")
        raw = data[pos: pos + size]
        pos += size
        return raw

    try:
        (config_len,) = take("<I")
        config_text = take_bytes(config_len).decode("utf-8")
        (meta_len,) = take("<I")
        meta = json.loads(take_bytes(meta_len).decode("utf-8"))

        sections = []
        for _ in range(4):
            (count,) = take("<I")
            blobs: dict[str, np.ndarray] = {}
            for _ in range(count):
                (name_len,) = take("<H")
                name = take_bytes(name_len).decode("utf-8")
                (ndim,) = take("<B")
                shape = tuple(take("<I")[0] for _ in range(ndim))
                size = int(np.prod(shape)) if shape else 1
                arr = np.frombuffer(take_bytes(size * 4), dtype="<f4").reshape(shape)
                blobs[name] = arr.copy()
            sections.append(blobs)
        if pos != len(data):
            raise ShapeMismatchOnLoad(f"{len(data) - pos} trailing bytes")
    except ShapeMismatchOnLoad:
        raise
    except Exception as exc:
        raise ShapeMismatchOnLoad(f"malformed checkpoint: {exc}") from exc

    return Checkpoint(
        config_text=config_text,
        epoch=int(meta["epoch"]),
        params=sections[0],
        best_params=sections[1],
        adam_m=sections[2],
        adam_v=sections[3],
        adam_step=int(meta["adam_step"]),
        best_val_loss=float(meta["best_val_loss"]),
        patience_left=int(meta["patience_left"]),
        rng_shuffle=meta["rng_shuffle"],
        rng_mask=meta["rng_mask"],
        calibrated=bool(meta["calibrated"]),
    )


def params_from_blobs(config: MaeConfig, blobs: dict[str, np.ndarray]) -> MaeParams:
    expected = mae.parameter_names(config)
    missing = [n for n in expected if n not in blobs]
    extra = [n for n in blobs if n not in expected]
    if missing or extra:
        raise ShapeMismatchOnLoad(
            f"parameter names disagree with config (missing {missing}, extra {extra})"
        )
    tensors = {
        name: nc.Tensor(blobs[name].copy(), requires_grad=True, dtype=np.float32)
        for name in expected
    }
    pos = mae.sinusoidal_table(config.seq_len, config.embed_dim)
    return MaeParams(config=config, pos_encoding=pos, tensors=tensors)


def _snapshot(params: MaeParams) -> dict[str, np.ndarray]:
    return {name: t.data.copy() for name, t in params.tensors.items()}


def load_dataset(data_dir: Path | str) -> tuple[DatasetManifest, list[EpochRecord]]:
    data_dir = Path(data_dir)
    manifest = load_manifest(data_dir / MANIFEST_FILENAME)
    records = read_epoch_cache(data_dir / CACHE_FILENAME)
    return manifest, records


def split_records(
    manifest: DatasetManifest, records: list[EpochRecord]
) -> dict[str, list[EpochRecord]]:
    out: dict[str, list[EpochRecord]] = {"train": [], "val": [], "test": []}
    for record in records:
        split = manifest.splits.get(record.subject_id)
        if split in out:
            out[split].append(record)
    return out


def _format_metrics(epoch: int, train_loss: float, val_loss: float,
                    val_mse: dict[str, float]) -> str:
    parts = [f"epoch={epoch}", f"train_loss={train_loss!r}", f"val_loss={val_loss!r}"]
    parts += [f"val_mse[{ch}]={v!r}" for ch, v in val_mse.items()]
    return "\t".join(parts)


def evaluate_split(
    params: MaeParams, records: list[EpochRecord]
) -> tuple[float, dict[str, float]]:
    """Full-visibility cosine loss and per-target MSE over a record list."""
    config = params.config
    total_loss = 0.0
    sq_err = {ch: 0.0 for ch in config.target_channels}
    plan = mae.full_visibility(config.seq_len)
    for record in records:
        tokens = mae.patchify(record.input_samples, config)
        latents = mae.encode(tokens, plan, params)
        recon = mae.decode(latents, plan, params)
        target_np = np.stack(
            [mae.patchify(record.targets[ch], config) for ch in config.target_channels]
        )
        loss = mae.cosine_loss(recon, nc.Tensor(target_np, dtype=params.dtype))
        total_loss += loss.item()
        flat = mae.unpatchify(recon.data)
        for i, ch in enumerate(config.target_channels):
            diff = flat[i].astype(np.float64) - record.targets[ch].astype(np.float64)
            sq_err[ch] += float(np.mean(diff * diff))
    n = max(len(records), 1)
    return total_loss / n, {ch: s / n for ch, s in sq_err.items()}


def calibrate_head_scale(
    params: MaeParams, records: list[EpochRecord]
) -> dict[str, float]:
    """Least-squares scale calibration of each reconstruction head.

    The cosine objective is invariant to the output scale of a head, so the
    trained scale is arbitrary; this fits the single scalar c minimizing
    ||c * recon - target||^2 over the given records (use the train split)
    and folds it into the head weights. Deterministic, no random state.
    """
    config = params.config
    num = {ch: 0.0 for ch in config.target_channels}
    den = {ch: 0.0 for ch in config.target_channels}
    for record in records:
        recon = mae.reconstruct_epoch(params, record)
        for ch in config.target_channels:
            pred = recon[ch].astype(np.float64)
            target = record.targets[ch].astype(np.float64)
            num[ch] += float(pred @ target)
            den[ch] += float(pred @ pred)
    scales = {}
    for ch in config.target_channels:
        scale = num[ch] / den[ch] if den[ch] > 1e-12 else 1.0
        scales[ch] = scale
        params.tensors[f"head.{ch}.w"].data *= np.float32(scale)
        params.tensors[f"head.{ch}.b"].data *= np.float32(scale)
    return scales


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics_lines: list[str] = field(default_factory=list)
    calibration: dict[str, float] = field(default_factory=dict)


def train(
    config: TrainConfig,
    splits: dict[str, list[EpochRecord]],
    resume: Checkpoint | None = None,
) -> TrainResult:
    """Run (or resume) training; returns the checkpoint and per-epoch metrics.

    Per epoch: seeded shuffle, mini-batch Adam updates on the masked cosine
    loss, then full-visibility validation. The best-validation parameter set
    is kept; training stops at max_epochs or when validation loss fails to
    improve for ``patience`` consecutive epochs.
    """
    train_records = splits.get("train", [])
    val_records = splits.get("val", [])
    if not train_records:
        raise EmptySplit("train split is empty")
    if not val_records:
        raise EmptySplit("val split is empty")
    for record in train_records + val_records:
        if record.input_channel != config.input_channel:
            raise ValueError(
                f"dataset input channel {record.input_channel!r} != configured "
                f"{config.input_channel!r}"
            )

    root = np.random.SeedSequence(config.seed)
    init_seq, shuffle_seq, mask_seq = root.spawn(3)

    if resume is None:
        params = mae.init_params(config.mae, init_seq, dtype=np.float32)
        adam = nc.AdamState.for_params(
            params.tensors, lr=config.lr, beta1=config.beta1,
            beta2=config.beta2, epsilon=config.epsilon,
        )
        shuffle_rng = np.random.Generator(np.random.Philox(shuffle_seq))
        mask_rng = np.random.Generator(np.random.Philox(mask_seq))
        start_epoch = 1
        best_val = np.inf
        patience_left = config.patience
        best_blobs = _snapshot(params)
    else:
        if resume.epoch >= config.max_epochs:
            raise TrainerError(
                f"checkpoint already at epoch {resume.epoch} >= max_epochs"
            )
        if resume.patience_left <= 0:
            raise TrainerError("checkpoint already stopped early; nothing to resume")
        params = params_from_blobs(config.mae, resume.params)
        adam = nc.AdamState.for_params(
            params.tensors, lr=config.lr, beta1=config.beta1,
            beta2=config.beta2, epsilon=config.epsilon,
        )
        for name in params.tensors:
            adam.m[name] = resume.adam_m[name].copy()
            adam.v[name] = resume.adam_v[name].copy()
        adam.step = resume.adam_step
        shuffle_rng = _restore_philox(resume.rng_shuffle)
        mask_rng = _restore_philox(resume.rng_mask)
        start_epoch = resume.epoch + 1
        best_val = resume.best_val_loss
        patience_left = resume.patience_left
        best_blobs = {name: arr.copy() for name, arr in resume.best_params.items()}

    metrics_lines: list[str] = []
    epoch = start_epoch - 1
    for epoch in range(start_epoch, config.max_epochs + 1):
        order = shuffle_rng.permutation(len(train_records))
        seen = 0
        loss_sum = 0.0
        for lo in range(0, len(order), config.batch_size):
            batch = [train_records[i] for i in order[lo: lo + config.batch_size]]
            nc.zero_grad(params.tensors)
            with nc.Tape() as tape:
                loss, _ = mae.forward_loss(batch, params, mask_rng)
            value = loss.item()
            if not np.isfinite(value):
                raise NonFiniteLoss(
                    f"loss became non-finite at epoch {epoch}, "
                    f"batch starting at {lo}"
                )
            tape.backward(loss)
            nc.adam_step(params.tensors, adam)
            loss_sum += value * len(batch)
            seen += len(batch)

        train_loss = loss_sum / seen
        val_loss, val_mse = evaluate_split(params, val_records)
        metrics_lines.append(_format_metrics(epoch, train_loss, val_loss, val_mse))

        if val_loss < best_val:
            best_val = val_loss
            best_blobs = _snapshot(params)
            patience_left = config.patience
        else:
            patience_left -= 1
            if patience_left <= 0:
                break

    best_params = params_from_blobs(config.mae, best_blobs)
    calibration: dict[str, float] = {}
    if config.calibrate_scale:
        calibration = calibrate_head_scale(best_params, train_records)

    checkpoint = Checkpoint(
        config_text=config_to_ini(config),
        epoch=epoch,
        params=_snapshot(params),
        best_params=_snapshot(best_params),
        adam_m={name: adam.m[name].copy() for name in params.tensors},
        adam_v={name: adam.v[name].copy() for name in params.tensors},
        adam_step=adam.step,
        best_val_loss=float(best_val),
        patience_left=patience_left,
        rng_shuffle=_philox_state(shuffle_rng),
        rng_mask=_philox_state(mask_rng),
        calibrated=config.calibrate_scale,
    )
    return TrainResult(
        checkpoint=checkpoint,
        metrics_lines=metrics_lines,
        calibration=calibration,
    )
