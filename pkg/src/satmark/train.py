"""Self-augmented watermark training and its two baseline modes.

One step: draw a latent from the mode's source distribution (sat: free
generation; external: encoded procedural images; prompted: guided
conditional generation), draw a fresh message, decode the original and the
watermarked image, push the watermarked image through one sampled attack at
the current ramp strength, extract, and take an AdamW step on the unified
loss. The frozen surrogate is never updated; a hash over all its parameters
is checked after every run.

Every random draw comes from a counter-based stream keyed by (seed, purpose,
index), so a resumed run consumes exactly the values the uninterrupted run
would have: checkpoints are bit-exact restart points, not approximations.
Latents come from a fixed pool of `latent_budget` entries (drawn lazily,
cycled once training passes the budget) unless fresh_latents is set.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from typing import IO

import numpy as np

from . import ndiff
from .attacks import AttackRanges, apply, sample_attack, schedule_gamma
from .featnet import FeatureNet
from .losses import LossWeights, image_loss, message_loss
from .ndiff import Tensor
from .ndiff.optim import AdamWState, adamw_step, zero_grads
from .persist import load_checkpoint, save_checkpoint
from .rng import derive, stream
from .toygen import SurrogateModel, sample_latent
from .wmnet import Extractor, Message, MessageProcessor, decode_bits, embed, trainable_params

MODES = ("sat", "external", "prompted")
_MODE_KIND = {"sat": "free", "external": "external", "prompted": "cond"}


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "sat"
    steps: int = 2000
    msg_len: int = 16
    batch_size: int = 1
    latent_budget: int = 2000
    fresh_latents: bool = False
    lr: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    weights: LossWeights = LossWeights()
    ranges: AttackRanges = AttackRanges()
    guidance: float | None = None  # prompted mode only; model default when None
    seed: int = 7700
    probe_every: int = 50  # clean-accuracy log cadence (observability only)
    checkpoint_every: int = 0  # 0 = final checkpoint only

    def __post_init__(self):
        if self.mode not in MODES:
            raise ndiff.ContractError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.steps < 1:
            raise ndiff.ContractError("steps must be >= 1")
        if self.msg_len < 1:
            raise ndiff.ContractError("msg_len must be >= 1")
        if self.batch_size < 1:
            raise ndiff.ContractError("batch_size must be >= 1")
        if self.latent_budget < 1:
            raise ndiff.ContractError("latent_budget must be >= 1")
        if self.lr <= 0:
            raise ndiff.ContractError("lr must be positive")
        if self.probe_every < 1:
            raise ndiff.ContractError("probe_every must be >= 1")

    def canonical(self) -> dict:
        """Trajectory-defining fields in a stable order. probe_every and
        checkpoint_every are observability knobs and deliberately excluded:
        they cannot change what is trained."""
        w = self.weights
        r = self.ranges
        return {
            "mode": self.mode,
            "steps": self.steps,
            "msg_len": self.msg_len,
            "batch_size": self.batch_size,
            "latent_budget": self.latent_budget,
            "fresh_latents": self.fresh_latents,
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "adam_eps": self.adam_eps,
            "weight_decay": self.weight_decay,
            "weights": [w.image_mse, w.image_perceptual, w.image_bal, w.message],
            "ranges": [list(r.of(k)) for k in
                       ("blur", "gauss_noise", "brightness", "contrast",
                        "desaturate", "perspective", "jpeg")],
            "guidance": self.guidance,
            "seed": self.seed,
        }

    def config_hash(self) -> bytes:
        text = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).digest()


@dataclass
class TrainResult:
    processor: MessageProcessor
    extractor: Extractor
    opt_state: AdamWState
    steps_done: int
    records: list = field(default_factory=list)
    surrogate_hash: str = ""


def surrogate_param_hash(model: SurrogateModel) -> str:
    """SHA-256 over every frozen surrogate parameter (denoiser, decoder,
    encoder), for the no-fine-tuning invariant."""
    h = hashlib.sha256()
    for name in sorted(model.params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(model.params[name].data, dtype=np.float32).tobytes())
    return h.hexdigest()


def build_networks(config: TrainConfig, model: SurrogateModel) -> tuple[MessageProcessor, Extractor]:
    proc = MessageProcessor(model, config.msg_len, derive(config.seed, "init", "proc"))
    ext = Extractor(model.config.image_shape, config.msg_len, derive(config.seed, "init", "ext"))
    return proc, ext


def checkpoint_tensors(
    config: TrainConfig,
    proc: MessageProcessor,
    ext: Extractor,
    state: AdamWState,
    steps_done: int,
) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for k, p in proc.params.items():
        out["proc." + k] = p.data
    for k, p in ext.params.items():
        out["ext." + k] = p.data
    for name, m in state.m.items():
        out["opt.m." + name] = m
    for name, v in state.v.items():
        out["opt.v." + name] = v
    out["meta.step"] = np.array([steps_done], dtype=np.float32)
    out["meta.opt_step"] = np.array([state.step], dtype=np.float32)
    out["meta.msg_len"] = np.array([config.msg_len], dtype=np.float32)
    return out


def save_state(path, config: TrainConfig, proc, ext, state, steps_done: int) -> None:
    save_checkpoint(path, checkpoint_tensors(config, proc, ext, state, steps_done), config.config_hash())


def load_state(
    path, config: TrainConfig, model: SurrogateModel
) -> tuple[MessageProcessor, Extractor, AdamWState, int]:
    """Rebuild networks and optimizer from a checkpoint, refusing any file
    whose stored config hash disagrees with `config`."""
    tensors, stored_hash = load_checkpoint(path)
    if stored_hash != config.config_hash():
        raise ndiff.ContractError(
            "checkpoint was written under a different training configuration"
        )
    proc, ext = build_networks(config, model)
    params = trainable_params(proc, ext)
    for name, p in params.items():
        if name not in tensors:
            raise ndiff.ContractError(f"checkpoint is missing tensor {name!r}")
        if tensors[name].shape != p.data.shape:
            raise ndiff.ContractError(f"checkpoint tensor {name!r} has wrong shape")
        p.data[...] = tensors[name]
    state = AdamWState()
    for name in params:
        mk, vk = "opt.m." + name, "opt.v." + name
        if mk in tensors:
            state.m[name] = tensors[mk].copy()
            state.v[name] = tensors[vk].copy()
    state.step = int(tensors["meta.opt_step"][0])
    steps_done = int(tensors["meta.step"][0])
    return proc, ext, state, steps_done


def _pool_latent(cache: dict, config: TrainConfig, model: SurrogateModel, sample_index: int) -> np.ndarray:
    kind = _MODE_KIND[config.mode]
    guidance = config.guidance if config.mode == "prompted" else None
    if config.fresh_latents:
        return sample_latent(model, kind, derive(config.seed, "pool"), sample_index, guidance)
    idx = sample_index % config.latent_budget
    z = cache.get(idx)
    if z is None:
        z = sample_latent(model, kind, derive(config.seed, "pool"), idx, guidance)
        cache[idx] = z
    return z


def clean_bit_accuracy(model, proc, ext, z: np.ndarray, m: Message) -> float:
    img = embed(model, proc, z, m)
    bits = decode_bits(ext.logits(Tensor(img.data)))
    return float((bits == m.bits).mean())


def run(
    config: TrainConfig,
    model: SurrogateModel,
    out_path=None,
    log_file: IO[str] | None = None,
    resume_path=None,
) -> TrainResult:
    """Train per the configuration; optionally continue from a checkpoint.

    Returns the trained networks plus the per-step records. When out_path is
    given the final (and cadenced) checkpoints are written there; a run
    aborted by non-finite numerics leaves a diagnostic checkpoint beside it.
    """
    hash_before = surrogate_param_hash(model)
    if resume_path is not None:
        proc, ext, state, start_step = load_state(resume_path, config, model)
    else:
        proc, ext = build_networks(config, model)
        state = AdamWState()
        start_step = 0
    if start_step > config.steps:
        raise ndiff.ContractError(
            f"checkpoint is at step {start_step}, beyond configured {config.steps}"
        )

    params = trainable_params(proc, ext)
    featnet = FeatureNet()
    pool_cache: dict[int, np.ndarray] = {}
    records: list[dict] = []

    def emit(rec: dict) -> None:
        records.append(rec)
        if log_file is not None:
            log_file.write(json.dumps(rec, sort_keys=True) + "\n")

    for step in range(start_step, config.steps):
        gamma = schedule_gamma(step, config.steps)
        spec = sample_attack(stream(config.seed, "attack", step), gamma, config.ranges)
        last_z = None
        last_m = None
        try:
            with ndiff.Tape() as tape:
                loss_m = None
                loss_i = None
                for j in range(config.batch_size):
                    gi = step * config.batch_size + j
                    z = _pool_latent(pool_cache, config, model, gi)
                    m = Message.random(stream(config.seed, "msg", gi), config.msg_len)
                    last_z, last_m = z, m
                    zt = Tensor(z)
                    _, original = model.decode_stages(zt)
                    marked = embed(model, proc, zt, m)
                    attacked = apply(marked, spec)
                    logits = ext.logits(attacked)
                    lm = message_loss(m.bits, logits, config.weights)
                    li = image_loss(original, marked, config.weights, featnet)
                    loss_m = lm if loss_m is None else loss_m + lm
                    loss_i = li if loss_i is None else loss_i + li
                scale = 1.0 / config.batch_size
                loss = (loss_m + loss_i) * scale
            total = loss.item()
            if not math.isfinite(total):
                raise ndiff.NumericError(f"non-finite loss at step {step}")
            ndiff.backward(tape, loss)
            adamw_step(
                params,
                state,
                lr=config.lr,
                beta1=config.beta1,
                beta2=config.beta2,
                eps=config.adam_eps,
                weight_decay=config.weight_decay,
            )
            zero_grads(params)
        except ndiff.NumericError as err:
            if out_path is not None:
                diag = str(out_path) + ".diag"
                save_state(diag, config, proc, ext, state, step)
            raise ndiff.NumericError(f"aborted at step {step}: {err}") from err

        rec = {
            "step": step,
            "total": total,
            "l_m": loss_m.item() * scale,
            "l_I": loss_i.item() * scale,
            "gamma": gamma,
            "attack": spec.kind,
        }
        if (step + 1) % config.probe_every == 0 or step + 1 == config.steps:
            rec["clean_acc"] = clean_bit_accuracy(model, proc, ext, last_z, last_m)
        emit(rec)

        done = step + 1
        if out_path is not None and config.checkpoint_every and done % config.checkpoint_every == 0 and done < config.steps:
            save_state(out_path, config, proc, ext, state, done)

    if out_path is not None:
        save_state(out_path, config, proc, ext, state, config.steps)

    hash_after = surrogate_param_hash(model)
    if hash_after != hash_before:
        raise ndiff.ContractError("frozen surrogate parameters changed during training")
    return TrainResult(
        processor=proc,
        extractor=ext,
        opt_state=state,
        steps_done=config.steps,
        records=records,
        surrogate_hash=hash_after,
    )


def resume(checkpoint_path, config: TrainConfig, model: SurrogateModel, out_path=None, log_file=None) -> TrainResult:
    return run(config, model, out_path=out_path, log_file=log_file, resume_path=checkpoint_path)


def smoke_config(**overrides) -> TrainConfig:
    """The seeded smoke profile used across the test suite: l = 16 on the
    default 3x32x32 surrogate, 2000 steps."""
    base = TrainConfig()
    return replace(base, **overrides) if overrides else base
