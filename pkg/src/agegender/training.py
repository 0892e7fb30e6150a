"""Multi-task loss, Adam, the epoch loop and resumable checkpoints."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import ops
from .data import DatasetSplit, iter_batches
from .evaluation import evaluate
from .models import MultiTaskModel, MultiTaskModelSpec
from .serialization import canonical_json, read_weight_file, write_weight_file
from .tensor import Tensor, backward, no_grad

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; ``checkpoint`` holds the last good state."""

    def __init__(self, msg, checkpoint=None):
        super().__init__(msg)
        self.checkpoint = checkpoint


@dataclass
class TrainConfig:
    learning_rate: float = 0.005
    batch_size: int = 16
    epochs: int = 100
    lambda_age: float = 1.0
    seed: int = 0
    augment: bool = True
    eval_every: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    # stop once eval-mode accuracy on the training set reaches this on both heads
    early_stop_train_accuracy: Optional[float] = None

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 0 or self.eval_every < 1:
            raise ValueError(f"batch_size, eval_every must be positive and epochs non-negative: {self}")
        if self.learning_rate < 0 or self.lambda_age < 0 or self.adam_eps <= 0:
            raise ValueError(f"learning_rate, lambda_age must be non-negative: {self}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def hash(self) -> str:
        """Digest of everything that shapes the trajectory (epoch budget and stopping rule excluded)."""
        d = self.to_dict()
        d.pop("epochs")
        d.pop("early_stop_train_accuracy")
        return hashlib.sha256(canonical_json(d).encode()).hexdigest()[:16]


def multitask_loss(gender_logits: Tensor, age_logits: Tensor, gender_labels, bucket_labels,
                   lambda_age: float = 1.0) -> Tensor:
    """CE(gender) + lambda_age * CE(age)."""
    loss = ops.cross_entropy(gender_logits, gender_labels)
    if lambda_age:
        loss = loss + ops.cross_entropy(age_logits, bucket_labels) * lambda_age
    return loss


class Adam:
    """Bias-corrected Adam over a named parameter set; updates in place."""

    def __init__(self, named_params, lr: float = 0.005, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params: dict[str, Tensor] = dict(named_params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            m_hat = m / bc1
            v_hat = v / bc2
            p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype)

    def state(self) -> dict:
        return {"t": self.t, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}


def adam_step(params: dict, state: Adam, lr: Optional[float] = None) -> None:
    """Functional wrapper: one Adam update of ``params`` (name -> Tensor with .grad)."""
    if lr is not None:
        state.lr = lr
    missing = set(params) - set(state.params)
    if missing:
        raise KeyError(f"parameters unknown to the optimizer: {sorted(missing)}")
    state.step()


# -- checkpoints ---------------------------------------------------------------------

@dataclass
class Checkpoint:
    model_spec: dict
    state: dict
    adam: dict
    adam_m: dict
    adam_v: dict
    epoch: int
    rng_state: dict
    config: dict
    config_hash: str
    best_score: Optional[float] = None
    log: list = field(default_factory=list)

    @classmethod
    def capture(cls, model: MultiTaskModel, opt: Adam, epoch: int, rng: np.random.Generator,
                config: TrainConfig, best_score=None, log=()) -> "Checkpoint":
        return cls(
            model_spec=model.spec.to_dict(),
            state={k: v.copy() for k, v in model.state_dict().items()},
            adam=opt.state(),
            adam_m={k: v.copy() for k, v in opt.m.items()},
            adam_v={k: v.copy() for k, v in opt.v.items()},
            epoch=epoch,
            rng_state=copy.deepcopy(rng.bit_generator.state),
            config=config.to_dict(),
            config_hash=config.hash(),
            best_score=best_score,
            log=list(log),
        )

    def build_model(self) -> MultiTaskModel:
        model = MultiTaskModel(MultiTaskModelSpec.from_dict(self.model_spec))
        model.load_state_dict(self.state)
        return model

    def header(self) -> dict:
        return {
            "kind": "checkpoint",
            "model": self.model_spec,
            "adam": self.adam,
            "epoch": self.epoch,
            "rng_state": self.rng_state,
            "config": self.config,
            "config_hash": self.config_hash,
            "best_score": self.best_score,
            "log": strip_wall_clock(self.log),  # keeps weight files reproducible
        }


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    tensors = dict(ckpt.state)
    tensors.update({f"adam.m.{k}": v for k, v in ckpt.adam_m.items()})
    tensors.update({f"adam.v.{k}": v for k, v in ckpt.adam_v.items()})
    write_weight_file(path, ckpt.header(), tensors)


def load_checkpoint(path) -> Checkpoint:
    header, tensors = read_weight_file(path)
    if header.get("kind") != "checkpoint":
        raise ValueError(f"{path} is a {header.get('kind')!r} file, not a checkpoint")
    state, m, v = {}, {}, {}
    for name, arr in tensors.items():
        if name.startswith("adam.m."):
            m[name[7:]] = arr
        elif name.startswith("adam.v."):
            v[name[7:]] = arr
        else:
            state[name] = arr
    return Checkpoint(
        model_spec=header["model"],
        state=state,
        adam=header["adam"],
        adam_m=m,
        adam_v=v,
        epoch=header["epoch"],
        rng_state=header["rng_state"],
        config=header["config"],
        config_hash=header["config_hash"],
        best_score=header.get("best_score"),
        log=header.get("log", []),
    )


# -- training loop --------------------------------------------------------------------

@dataclass
class TrainResult:
    model: MultiTaskModel
    final: Checkpoint
    best: Checkpoint
    log: list
    stopped_early: bool = False


def _restore(model: MultiTaskModel, opt: Adam, ckpt: Checkpoint) -> np.random.Generator:
    model.load_state_dict(ckpt.state)
    opt.t = int(ckpt.adam["t"])
    for k in opt.m:
        opt.m[k][...] = ckpt.adam_m[k]
        opt.v[k][...] = ckpt.adam_v[k]
    rng = np.random.default_rng()
    rng.bit_generator.state = copy.deepcopy(ckpt.rng_state)
    return rng


def _previous_best(out: Optional[Path], resume: Checkpoint, config: TrainConfig) -> Checkpoint:
    """Best checkpoint of the interrupted run if it sits in ``out``, else the resume point itself."""
    path = out / "best.aagw" if out is not None else None
    if path is not None and path.exists():
        try:
            prev = load_checkpoint(path)
        except (ValueError, OSError) as exc:
            logger.warning("ignoring unreadable %s: %s", path, exc)
        else:
            if prev.config_hash == config.hash() and prev.epoch <= resume.epoch:
                return prev
    return resume


def train(model: MultiTaskModel, split: DatasetSplit, config: TrainConfig, out_dir=None,
          resume: Optional[Checkpoint] = None, strict_config: bool = False) -> TrainResult:
    """Epoch loop: shuffle, batch, forward, multi-task loss, backward, Adam.

    Each epoch appends ``{epoch, train_loss, val_gender_acc, val_age_acc,
    val_aabd, wall_seconds}`` to the log (``log.ndjson`` in ``out_dir``).
    The checkpoint with the best mean validation accuracy is kept as
    ``best``; ``out_dir`` also receives ``best.aagw`` and ``final.aagw``.
    """
    if not split.train:
        raise ValueError("training partition is empty")
    top = max(r.bucket for part in (split.train, split.val) for r in part)
    if top >= model.spec.num_age_buckets:
        raise ValueError(f"model has {model.spec.num_age_buckets} age buckets but the data uses bucket {top}")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    opt = Adam(model.named_parameters(), config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    hw = (model.spec.input_size, model.spec.input_size)

    log: list[dict] = []
    best: Optional[Checkpoint] = None
    best_score = None
    start_epoch = 0
    if resume is not None:
        if resume.config_hash != config.hash():
            msg = f"checkpoint config hash {resume.config_hash} differs from current {config.hash()}"
            if strict_config:
                raise ValueError(msg)
            logger.warning(msg)
        rng = _restore(model, opt, resume)
        start_epoch = resume.epoch
        best_score = resume.best_score
        log = list(resume.log)
        best = _previous_best(out, resume, config)
    else:
        rng = np.random.default_rng(config.seed)
    log_path = out / "log.ndjson" if out is not None else None
    if log_path is not None:
        log_path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in log))

    last_good = Checkpoint.capture(model, opt, start_epoch, rng, config, best_score, log)
    stopped_early = False
    for epoch in range(start_epoch + 1, config.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(split.train))
        records = [split.train[i] for i in order]
        model.train()
        total, count = 0.0, 0
        for batch in iter_batches(records, config.batch_size, hw, config.augment, config.seed, epoch, model.dtype):
            opt.zero_grad()
            out_ = model(batch.images)
            loss = multitask_loss(out_.gender_logits, out_.age_logits, batch.gender, batch.bucket,
                                  config.lambda_age)
            if not np.isfinite(loss.item()):
                if out is not None:
                    save_checkpoint(out / "last_good.aagw", last_good)
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", last_good)
            backward(loss)
            opt.step()
            total += loss.item() * len(batch)
            count += len(batch)
        record = {"epoch": epoch, "train_loss": total / count,
                  "val_gender_acc": None, "val_age_acc": None, "val_aabd": None}
        if split.val and epoch % config.eval_every == 0:
            rep = evaluate(model, split.val)
            record.update(val_gender_acc=rep.gender_accuracy, val_age_acc=rep.age_bucket_accuracy,
                          val_aabd=rep.aabd)
        if config.early_stop_train_accuracy is not None:
            rep = evaluate(model, split.train)
            record.update(train_gender_acc=rep.gender_accuracy, train_age_acc=rep.age_bucket_accuracy)
            stopped_early = min(rep.gender_accuracy, rep.age_bucket_accuracy) >= config.early_stop_train_accuracy
        record["wall_seconds"] = time.perf_counter() - t0
        log.append(record)
        if log_path is not None:
            with open(log_path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

        score = None
        if record["val_gender_acc"] is not None:
            score = 0.5 * (record["val_gender_acc"] + record["val_age_acc"])
        last_good = Checkpoint.capture(model, opt, epoch, rng, config, best_score, log)
        if score is not None and (best_score is None or score > best_score):
            best_score = score
            last_good.best_score = best_score
            best = last_good
        logger.info("epoch %d loss %.4f val %s", epoch, record["train_loss"], score)
        if stopped_early:
            break

    final = last_good
    if best is None:
        best = final
    if out is not None:
        save_checkpoint(out / "final.aagw", final)
        save_checkpoint(out / "best.aagw", best)
    return TrainResult(model, final, best, log, stopped_early)


def strip_wall_clock(log: list) -> list:
    return [{k: v for k, v in r.items() if k != "wall_seconds"} for r in log]
