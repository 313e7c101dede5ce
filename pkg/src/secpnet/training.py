"""SGD training with inverse-time learning-rate decay, the staged schedule
for cascaded variants, and the binary checkpoint format."""

from __future__ import annotations

import enum
import io
import logging
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, FormatError, NumericalError, TrainingDivergedError
from .networks import Network, NetworkConfig, VariantId, build_variant
from .tensor import Tensor, softmax_cross_entropy

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.01
    dr: float = 0.1
    epochs: int = 100
    batch_size: int = 16
    seed: int = 0
    momentum: float = 0.0
    # stage-1 convergence test: stop once the epoch loss has improved by
    # less than early_stop_delta for early_stop_patience epochs in a row
    early_stop_patience: int = 10
    early_stop_delta: float = 1e-4

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ConfigurationError(f"lr0 must be > 0, got {self.lr0}")
        if self.dr < 0:
            raise ConfigurationError(f"dr must be >= 0, got {self.dr}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be >= 1")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.seed < 0:
            raise ConfigurationError("seed must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """``lr0 / (1 + dr * epoch)`` with ``epoch`` the 0-based current epoch."""
    if epoch < 0:
        raise ConfigurationError(f"epoch must be >= 0, got {epoch}")
    return cfg.lr0 / (1.0 + cfg.dr * epoch)


class SGD:
    """Plain SGD with optional heavy-ball momentum. Frozen parameters are
    skipped; every gradient is cleared after a step."""

    def __init__(self, params, momentum: float = 0.0):
        self.params = list(params)
        self.momentum = momentum
        self._velocity = {}

    def step(self, lr: float) -> None:
        for p in self.params:
            if p.frozen:
                p.grad = None
                continue
            if p.grad is None:
                raise RuntimeError(f"trainable parameter {p.name!r} has no gradient; was backward() run?")
            g = p.grad
            if self.momentum:
                v = self._velocity.get(id(p))
                v = g.copy() if v is None else self.momentum * v + g
                self._velocity[id(p)] = v
                g = v
            p.data -= (lr * g).astype(p.dtype, copy=False)
            p.grad = None


def sgd_step(params, lr: float) -> None:
    """``p <- p - lr * p.grad`` for every non-frozen parameter, then clear grads."""
    SGD(params).step(lr)


class Stage(enum.IntEnum):
    PretrainBackbone = 1
    AddSECAndTune = 2
    TrainSecondaryFrozenPrimary = 3
    FinetuneAll = 4


@dataclass
class StagePlan:
    """Epoch budget per stage, in execution order."""

    epochs: dict = field(default_factory=dict)

    def __post_init__(self):
        stages = list(self.epochs)
        if stages != sorted(stages) or len(set(stages)) != len(stages):
            raise ConfigurationError(f"stages must be in order and unique, got {stages}")
        for st, n in self.epochs.items():
            if not isinstance(st, Stage) or n < 1:
                raise ConfigurationError(f"invalid stage entry {st!r}: {n!r}")

    @classmethod
    def for_variant(cls, variant: VariantId, epochs_per_stage=100) -> "StagePlan":
        stages = list(Stage) if VariantId(variant).is_cascade else [Stage.PretrainBackbone, Stage.AddSECAndTune]
        if isinstance(epochs_per_stage, int):
            epochs_per_stage = [epochs_per_stage] * len(stages)
        if len(epochs_per_stage) != len(stages):
            raise ConfigurationError(
                f"{VariantId(variant).name} needs {len(stages)} stage epoch counts, got {len(epochs_per_stage)}"
            )
        return cls(dict(zip(stages, epochs_per_stage)))

    @property
    def stages(self) -> list:
        return list(self.epochs)

    def check_variant(self, variant: VariantId) -> None:
        expected = StagePlan.for_variant(variant, 1).stages
        if self.stages != expected:
            raise ConfigurationError(
                f"plan stages {[s.name for s in self.stages]} do not match {VariantId(variant).name}, "
                f"which needs {[s.name for s in expected]}"
            )


def prepare_stage(net: Network, stage: Stage | None) -> None:
    """Apply the freezes and SEC switch a stage trains under."""
    net.unfreeze()
    net.sec_enabled = True
    if stage is None or stage is Stage.FinetuneAll:
        return
    if stage is Stage.TrainSecondaryFrozenPrimary:
        net.primary.freeze()
        return
    if net.variant.is_cascade:
        net.secondary.freeze()
    if stage is Stage.PretrainBackbone:
        net.sec_enabled = False
        for m in net.primary.sec_modules():
            m.freeze()


def stage_loss(net: Network, images, masks, stage: Stage | None) -> Tensor:
    """Cross-entropy on the primary logits in stages 1-2, on the final logits otherwise."""
    x = images if isinstance(images, Tensor) else Tensor(images)
    if stage in (Stage.PretrainBackbone, Stage.AddSECAndTune):
        net.config.check_extent(*x.shape[2:])
        logits = net.primary(x, use_sec=net.sec_enabled)
    else:
        logits = net.forward(x).final
    return softmax_cross_entropy(logits, masks)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    lr: float
    loss: float
    seconds: float


@dataclass
class TrainingLog:
    records: list = field(default_factory=list)
    stage: str = ""

    @property
    def epochs(self) -> list:
        return [r.epoch for r in self.records]

    @property
    def lrs(self) -> list:
        return [r.lr for r in self.records]

    @property
    def losses(self) -> list:
        return [r.loss for r in self.records]

    def trajectory(self) -> list:
        """Everything except wall time, which is never reproducible."""
        return [(r.epoch, r.lr, r.loss) for r in self.records]

    def to_csv(self) -> str:
        lines = ["epoch,lr,loss,seconds"]
        lines += [f"{r.epoch},{r.lr!r},{r.loss!r},{r.seconds:.6f}" for r in self.records]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "TrainingLog":
        rows = [ln for ln in text.strip().splitlines()]
        if not rows or rows[0] != "epoch,lr,loss,seconds":
            raise FormatError("training log must start with header 'epoch,lr,loss,seconds'", 0)
        recs = []
        for ln in rows[1:]:
            e, lr, loss, sec = ln.split(",")
            recs.append(EpochRecord(int(e), float(lr), float(loss), float(sec)))
        return cls(recs)


def stack_batch(samples: Sequence) -> tuple:
    images = np.stack([np.asarray(s.image, dtype=np.float32).reshape(1, *s.mask.shape) for s in samples])
    masks = np.stack([np.asarray(s.mask) for s in samples]).astype(np.intp)
    return images, masks


def train_stage(
    net: Network,
    dataset: Sequence,
    cfg: TrainConfig,
    stage: Stage | None = None,
    early_stop: bool = False,
) -> TrainingLog:
    """Run ``cfg.epochs`` epochs of minibatch SGD on ``dataset`` (a sequence
    of samples). Shuffling is seeded by ``cfg.seed`` and the stage."""
    if len(dataset) == 0:
        raise ConfigurationError("cannot train on an empty dataset")
    prepare_stage(net, stage)
    rng = np.random.default_rng([cfg.seed, int(stage or 0)])
    opt = SGD(net.parameters(), cfg.momentum)
    log = TrainingLog(stage=stage.name if stage is not None else "")
    best, stale = np.inf, 0
    for epoch in range(cfg.epochs):
        start = time.perf_counter()
        lr = lr_at_epoch(cfg, epoch)
        order = rng.permutation(len(dataset))
        total = 0.0
        for b, lo in enumerate(range(0, len(order), cfg.batch_size)):
            images, masks = stack_batch([dataset[i] for i in order[lo:lo + cfg.batch_size]])
            try:
                loss = stage_loss(net, images, masks, stage)
                loss.backward()
            except NumericalError as exc:
                raise TrainingDivergedError(epoch, b, lr, str(exc)) from exc
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDivergedError(epoch, b, lr)
            opt.step(lr)
            total += value * len(images)
        epoch_loss = total / len(dataset)
        log.records.append(EpochRecord(epoch, lr, epoch_loss, time.perf_counter() - start))
        logger.debug("stage=%s epoch=%d lr=%.6g loss=%.6f", log.stage, epoch, lr, epoch_loss)
        if early_stop:
            stale = stale + 1 if best - epoch_loss < cfg.early_stop_delta else 0
            best = min(best, epoch_loss)
            if stale >= cfg.early_stop_patience:
                logger.info("stage %s converged after %d epochs", log.stage, epoch + 1)
                break
    return log


@dataclass
class StagedResult:
    network: Network
    checkpoints: list  # bytes, one per stage
    logs: list  # TrainingLog, one per stage


def staged_train(
    variant: VariantId,
    dataset: Sequence,
    plan: StagePlan,
    cfg: TrainConfig,
    net_config: NetworkConfig = NetworkConfig(),
    out_dir: str | Path | None = None,
    on_stage_start: Callable | None = None,
) -> StagedResult:
    """Train a variant stage by stage.

    1. backbone alone (SEC bypassed), to convergence or the epoch budget;
    2. SEC pyramid switched on, shared layers continue from step 1;
    3. primary frozen, secondary trained;
    4. everything fine-tuned.

    Single-stage variants run steps 1-2 only. A checkpoint is produced after
    each stage and, when ``out_dir`` is given, written there as
    ``stage{n}_{name}.ckpt`` together with ``stage{n}_{name}.csv``.
    """
    variant = VariantId(variant)
    plan.check_variant(variant)
    net = build_variant(variant, net_config, seed=cfg.seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    checkpoints, logs = [], []
    for stage, epochs in plan.epochs.items():
        stage_cfg = TrainConfig(**{**asdict(cfg), "epochs": epochs})
        prepare_stage(net, stage)
        if on_stage_start is not None:
            on_stage_start(stage, net)
        log = train_stage(net, dataset, stage_cfg, stage, early_stop=stage is Stage.PretrainBackbone)
        net.unfreeze()
        net.sec_enabled = True
        blob = save_checkpoint(net)
        checkpoints.append(blob)
        logs.append(log)
        if out is not None:
            stem = f"stage{int(stage)}_{stage.name}"
            (out / f"{stem}.ckpt").write_bytes(blob)
            (out / f"{stem}.csv").write_text(log.to_csv())
    return StagedResult(net, checkpoints, logs)


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"SECPCKPT"
CKPT_VERSION = 1
_CONFIG_FIELDS = ("in_channels", "num_classes", "base_width", "depth", "se_ratio")


def save_checkpoint(net: Network) -> bytes:
    buf = io.BytesIO()
    cfg = net.config
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<BB", CKPT_VERSION, int(net.variant)))
    buf.write(struct.pack("<5I", *(getattr(cfg, f) for f in _CONFIG_FIELDS)))
    named = list(net.named_parameters())
    buf.write(struct.pack("<I", len(named)))
    for name, p in named:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", p.ndim))
        buf.write(struct.pack(f"<{p.ndim}I", *p.shape))
        buf.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError(f"truncated file while reading {what}", self.pos)
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(source) -> Network:
    """Rebuild a network from checkpoint bytes or a path."""
    blob = source if isinstance(source, (bytes, bytearray)) else Path(source).read_bytes()
    r = _Reader(bytes(blob))
    if r.take(len(CKPT_MAGIC), "magic") != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    version, variant_id = r.unpack("<BB", "header")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", len(CKPT_MAGIC))
    try:
        variant = VariantId(variant_id)
    except ValueError:
        raise FormatError(f"unknown variant id {variant_id}", len(CKPT_MAGIC) + 1) from None
    cfg_pos = r.pos
    values = r.unpack("<5I", "network config")
    try:
        cfg = NetworkConfig(**dict(zip(_CONFIG_FIELDS, values)))
    except ConfigurationError as exc:
        raise FormatError(f"invalid network config: {exc}", cfg_pos) from None
    (count,) = r.unpack("<I", "tensor count")
    state = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H", "name length")
        name_pos = r.pos
        try:
            name = r.take(nlen, "tensor name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not UTF-8", name_pos) from None
        (ndim,) = r.unpack("<B", "ndim")
        dims = r.unpack(f"<{ndim}I", "dims")
        size = int(np.prod(dims)) if ndim else 1
        payload = r.take(4 * size, f"payload of {name}")
        state[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos != len(r.blob):
        raise FormatError("trailing bytes after last tensor", r.pos)
    net = build_variant(variant, cfg)
    net.load_state_dict(state)
    return net
