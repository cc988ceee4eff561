"""Joint optimization of the depth and pose networks with Adam."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Mapping, Optional, Sequence

import numpy as np

from . import checkpoint as ckpt
from .config import RESUMABLE_KEYS, RunConfig, diff
from .decoder import DCMNet, DepthPyramid
from .encoder import SwinEncoder
from .loss import NumericError, TrainBatch, total_loss
from .numerics import Tensor, backward, default_dtype, no_grad
from .numerics.nn import Parameter
from .posenet import PoseNet, se3
from .synthdata import DataError, SyntheticSequence


class NonFiniteGradient(NumericError):
    pass


# -- optimizer ----------------------------------------------------------------

@dataclass
class OptimState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, params: Mapping[str, Parameter], beta1=0.9, beta2=0.999, eps=1e-8) -> "OptimState":
        return cls({n: np.zeros_like(p.data) for n, p in params.items()},
                   {n: np.zeros_like(p.data) for n, p in params.items()}, 0, beta1, beta2, eps)


def adam_step(params: Mapping[str, Parameter], grads: Mapping[str, np.ndarray], state: OptimState,
              lr: float) -> None:
    """Bias-corrected Adam update in place.  All gradients are checked before anything changes."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for parameter {name}", {name: float("nan")})
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)


def lr_at(epoch: int, base: float = 1e-4, decay_epoch: int = 15, factor: float = 0.1) -> float:
    """Step schedule: ``base`` before ``decay_epoch``, ``base * factor`` from it on."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return base if epoch < decay_epoch else base * factor


# -- models -------------------------------------------------------------------

@dataclass
class Models:
    encoder: SwinEncoder
    decoder: DCMNet
    pose: PoseNet

    def named_parameters(self) -> dict[str, Parameter]:
        out: dict[str, Parameter] = {}
        for prefix in ("encoder", "decoder", "pose"):
            out.update(getattr(self, prefix).named_parameters(prefix + "."))
        return out

    def num_parameters(self) -> dict[str, int]:
        return {k: getattr(self, k).num_parameters() for k in ("encoder", "decoder", "pose")}

    def depth(self, image: Tensor) -> DepthPyramid:
        return self.decoder(self.encoder(image))


def build_models(cfg: RunConfig, rng: np.random.Generator) -> Models:
    with default_dtype(cfg.precision):
        enc = SwinEncoder(rng, cfg.encoder_config())
        dec = DCMNet(rng, cfg.encoder_channels(), cfg.decoder_config())
        pose = PoseNet(rng, cfg.pose_config())
    return Models(enc, dec, pose)


# -- data ---------------------------------------------------------------------

class TripletSource:
    """Frame triplets (t-1, t, t+1) from the training part of each sequence.

    The last ``holdout`` frames of every sequence are never used as a target
    or a source.
    """

    def __init__(self, sequences: Sequence[SyntheticSequence], holdout: int, height: int, width: int):
        self.sequences = list(sequences)
        self.items: list[tuple[int, int]] = []
        for si, seq in enumerate(self.sequences):
            if seq.frames.shape[2:] != (height, width):
                raise DataError(f"scene {si} frames are {seq.frames.shape[2:]}, config expects {(height, width)}")
            usable = len(seq) - holdout
            self.items.extend((si, t) for t in range(1, usable - 1))
        if not self.items:
            raise DataError("no training triplets: sequences too short for the holdout")

    def __len__(self) -> int:
        return len(self.items)

    def batch(self, indices: Sequence[int], dtype) -> TrainBatch:
        picks = [self.items[i] for i in indices]
        grab = lambda k: Tensor(np.stack([self.sequences[s].frames[t + k] for s, t in picks]).astype(dtype))
        intr = np.stack([self.sequences[s].intrinsics for s, _ in picks])
        return TrainBatch(grab(0), {-1: grab(-1), 1: grab(1)}, intr)


def heldout_frames(sequences: Sequence[SyntheticSequence], holdout: int) -> list[tuple[int, int]]:
    return [(si, t) for si, seq in enumerate(sequences) for t in range(len(seq) - holdout, len(seq))]


# -- one step -----------------------------------------------------------------

def step_loss(models: Models, batch: TrainBatch, cfg: RunConfig, rng: np.random.Generator):
    disps = models.depth(batch.target)
    transforms = {
        1: se3(models.pose(batch.target, batch.sources[1])),
        -1: se3(models.pose(batch.sources[-1], batch.target), invert=True),
    }
    return total_loss(batch, disps, transforms, cfg.loss_config(), rng, return_terms=True)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= scale
    return norm


# -- training loop ------------------------------------------------------------

@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    order: Optional[np.ndarray] = None
    pos: int = 0


@dataclass
class FitResult:
    models: Models
    losses: list[float]
    state: TrainState
    optim: OptimState
    seconds: float = 0.0
    checkpoints: list[Path] = field(default_factory=list)


def _rng_record(rng: np.random.Generator) -> np.ndarray:
    st = rng.bit_generator.state
    return ckpt.json_record({"bit_generator": st["bit_generator"],
                             "state": {k: str(v) for k, v in st["state"].items()},
                             "has_uint32": st["has_uint32"], "uinteger": st["uinteger"]})


def _restore_rng(rng: np.random.Generator, arr: np.ndarray) -> None:
    rec = ckpt.read_json_record(arr)
    rng.bit_generator.state = {"bit_generator": rec["bit_generator"],
                               "state": {k: int(v) for k, v in rec["state"].items()},
                               "has_uint32": rec["has_uint32"], "uinteger": rec["uinteger"]}


def _config_record(cfg: RunConfig) -> np.ndarray:
    return ckpt.json_record({k: list(v) if isinstance(v, tuple) else v for k, v in cfg.as_dict().items()})


def read_config(records: Mapping[str, np.ndarray]) -> dict:
    raw = ckpt.read_json_record(records["config"])
    return {k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()}


def checkpoint_records(models: Models, optim: OptimState, state: TrainState, rng: np.random.Generator,
                       cfg: RunConfig) -> dict[str, np.ndarray]:
    rec: dict[str, np.ndarray] = {}
    for name, p in models.named_parameters().items():
        rec[f"param/{name}"] = p.data
    for name in optim.m:
        rec[f"adam/m/{name}"] = optim.m[name]
        rec[f"adam/v/{name}"] = optim.v[name]
    rec["adam/t"] = np.array(optim.t, dtype=np.int64)
    rec["state/step"] = np.array(state.step, dtype=np.int64)
    rec["state/epoch"] = np.array(state.epoch, dtype=np.int64)
    rec["state/pos"] = np.array(state.pos, dtype=np.int64)
    rec["state/order"] = (np.asarray(state.order, dtype=np.int64) if state.order is not None
                          else np.zeros(0, dtype=np.int64))
    rec["rng"] = _rng_record(rng)
    rec["config"] = _config_record(cfg)
    return rec


def check_config(records: Mapping[str, np.ndarray], cfg: RunConfig, ignore=RESUMABLE_KEYS) -> None:
    saved = read_config(records)
    problems = diff(saved, cfg.as_dict(), ignore)
    if problems:
        raise ckpt.CheckpointError("checkpoint config does not match:\n  " + "\n  ".join(problems))


def load_models(records: Mapping[str, np.ndarray], cfg: RunConfig) -> Models:
    """Models built from ``cfg`` with parameters from a checkpoint."""
    models = build_models(cfg, np.random.default_rng(0))
    params = models.named_parameters()
    missing = sorted(set(params) - {k[6:] for k in records if k.startswith("param/")})
    if missing:
        raise ckpt.CheckpointError(f"checkpoint lacks parameters: {missing[:5]}")
    for name, p in params.items():
        arr = records[f"param/{name}"]
        if arr.shape != p.shape:
            raise ckpt.CheckpointError(f"parameter {name}: checkpoint shape {arr.shape}, model {p.shape}")
        p.data = np.ascontiguousarray(arr, dtype=p.dtype)
    return models


def _restore(records, cfg: RunConfig, rng) -> tuple[Models, OptimState, TrainState]:
    check_config(records, cfg)
    models = load_models(records, cfg)
    params = models.named_parameters()
    optim = OptimState({n: records[f"adam/m/{n}"].copy() for n in params},
                       {n: records[f"adam/v/{n}"].copy() for n in params},
                       int(records["adam/t"]), cfg.beta1, cfg.beta2, cfg.adam_eps)
    order = records["state/order"]
    state = TrainState(int(records["state/step"]), int(records["state/epoch"]),
                       order.copy() if order.size else None, int(records["state/pos"]))
    _restore_rng(rng, records["rng"])
    return models, optim, state


def _format_loss(step: int, lr: float, loss: float) -> str:
    return f"{step} {lr!r} {loss!r}\n"


def fit(cfg: RunConfig, sequences: Sequence[SyntheticSequence], out_dir: Path,
        resume: Optional[Path] = None, log: Optional[Callable[[str], None]] = None,
        max_steps: Optional[int] = None) -> FitResult:
    """Train from scratch (or from ``resume``) and write ``loss_log.txt`` and checkpoints to ``out_dir``.

    ``max_steps`` stops early without changing the schedule (used to interrupt runs).
    """
    out_dir = Path(out_dir)
    (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    dtype = np.dtype(cfg.precision)
    source = TripletSource(sequences, cfg.holdout, cfg.height, cfg.width)
    steps_per_epoch = len(source) // cfg.batch_size
    if steps_per_epoch < 1:
        raise DataError(f"{len(source)} triplets cannot fill a batch of {cfg.batch_size}")
    total = cfg.steps if cfg.steps > 0 else cfg.epochs * steps_per_epoch
    stop = total if max_steps is None else min(total, max_steps)

    rng = np.random.default_rng(cfg.seed)
    if resume is not None:
        models, optim, state = _restore(ckpt.load(resume), cfg, rng)
    else:
        models = build_models(cfg, rng)
        optim = OptimState.zeros(models.named_parameters(), cfg.beta1, cfg.beta2, cfg.adam_eps)
        state = TrainState()
    params = models.named_parameters()

    log_path = out_dir / "loss_log.txt"
    prior = log_path.read_text().splitlines(keepends=True)[:state.step] if (resume and log_path.exists()) else []
    losses = [float(line.split()[2]) for line in prior]
    result = FitResult(models, losses, state, optim)
    start = time.perf_counter()

    def save(path: Path) -> None:
        ckpt.save(path, checkpoint_records(models, optim, state, rng, cfg))
        result.checkpoints.append(path)

    with open(log_path, "w") as f, default_dtype(dtype):
        f.writelines(prior)
        while state.step < stop:
            if state.order is None:
                state.order = rng.permutation(len(source))
                state.pos = 0
            idx = state.order[state.pos:state.pos + cfg.batch_size]
            state.pos += cfg.batch_size
            lr = lr_at(state.epoch, cfg.lr, cfg.lr_decay_epoch, cfg.lr_decay)

            batch = source.batch(idx, dtype)
            for p in params.values():
                p.zero_grad()
            loss, terms = step_loss(models, batch, cfg, rng)
            backward(loss)
            grads = {n: p.grad for n, p in params.items()}
            if cfg.grad_clip > 0:
                clip_gradients(grads, cfg.grad_clip)
            adam_step(params, grads, optim, lr)

            state.step += 1
            value = float(loss.item())
            losses.append(value)
            f.write(_format_loss(state.step, lr, value))
            f.flush()
            epoch_done = state.pos + cfg.batch_size > len(source)
            if epoch_done:
                state.epoch += 1
                state.order = None
                state.pos = 0
            if log and (state.step % 50 == 0 or state.step == 1):
                rate = (time.perf_counter() - start) / max(1, state.step - len(prior))
                log(f"step {state.step}/{total} epoch {state.epoch} lr {lr:.1e} loss {value:.5f} ({rate:.2f} s/step)")
            if state.step % cfg.checkpoint_every == 0:
                save(out_dir / "checkpoints" / f"step_{state.step:07d}.swdp")
            if epoch_done or state.step == stop:
                save(out_dir / "checkpoints" / "last.swdp")
    result.seconds = time.perf_counter() - start
    return result


@no_grad()
def predict_depth(models: Models, images: np.ndarray, cfg: RunConfig, batch: int = 8) -> np.ndarray:
    """(N, 3, H, W) images to (N, H, W) full-resolution depth."""
    from .loss import disp_to_depth

    out = []
    with default_dtype(cfg.precision):
        for i in range(0, len(images), batch):
            x = Tensor(np.asarray(images[i:i + batch], dtype=cfg.precision))
            disp = models.depth(x).at_scale(0).data[:, 0]
            out.append(disp_to_depth(disp.astype(np.float64), cfg.min_depth, cfg.max_depth))
    return np.concatenate(out)


def iterate_batches(n: int, size: int) -> Iterator[slice]:
    for i in range(0, n, size):
        yield slice(i, min(n, i + size))
