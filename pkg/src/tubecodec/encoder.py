"""Fitting unique parameters: reconstruction descent plus temporal-coherence finetuning.

At desk scale the amortized weight predictor is replaced by direct Adam
optimization of each tubelet's unique tokens against frozen shared base
parameters; the losses, the parameter structure and the coherence
regularization are unchanged by this substitution.  A per-position fit runs in
two stages: independent per-clip reconstruction fits (warm-started from the
previous clip), then a joint finetune of all clips under

    sum_i MSE_i + lambda * sum_i L1(theta_i - theta_{i+1})

where theta is, by default, the modulated weight vector.  The L1 term uses the
subgradient convention sign(0) = 0 so converged identical weights stay pinned.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import bitstream
from .errors import ConfigurationError, DivergenceError
from .hyponet import (
    HypoNetConfig,
    ParamSet,
    clip_mse_and_gradients,
    init_base,
    init_unique,
    modulated_grads_to_unique,
)

RESIDUAL_MODES = ("none", "from_first", "from_previous")
REG_TARGETS = ("modulated", "unique", "both")


@dataclass
class EncoderConfig:
    """Optimization and stream-layout settings for one encode."""

    iterations: int = 500
    finetune_iterations: int = 500
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lambda_temp: float = 0.1
    reg_target: str = "modulated"
    residual_mode: str = "from_previous"
    keyframe_interval: int | None = None
    warm_start: bool = True
    warm_iterations: int | None = None  # budget for warm-started clips (None: iterations)
    warm_learning_rate: float | None = None  # None: learning_rate / 5
    finetune_learning_rate: float | None = None  # None: learning_rate
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigurationError("iterations must be >= 1")
        if self.finetune_iterations < 0:
            raise ConfigurationError("finetune_iterations must be >= 0")
        if self.warm_iterations is not None and self.warm_iterations < 1:
            raise ConfigurationError("warm_iterations must be >= 1")
        if self.lambda_temp < 0:
            raise ConfigurationError("lambda_temp must be >= 0")
        if self.reg_target not in REG_TARGETS:
            raise ConfigurationError(f"reg_target must be one of {REG_TARGETS}")
        if self.residual_mode not in RESIDUAL_MODES:
            raise ConfigurationError(f"residual_mode must be one of {RESIDUAL_MODES}")
        if self.keyframe_interval is not None and self.keyframe_interval < 1:
            raise ConfigurationError("keyframe_interval must be >= 1 (or None for never)")

    @property
    def effective_warm_iterations(self) -> int:
        return self.iterations if self.warm_iterations is None else self.warm_iterations

    @property
    def effective_warm_lr(self) -> float:
        # refits from a warm start move gently so consecutive solutions stay
        # close in weight space; this is what keeps residuals narrow
        if self.warm_learning_rate is not None:
            return self.warm_learning_rate
        return self.learning_rate / 5.0

    @property
    def effective_finetune_lr(self) -> float:
        if self.finetune_learning_rate is not None:
            return self.finetune_learning_rate
        return self.learning_rate

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "finetune_iterations": self.finetune_iterations,
            "learning_rate": self.learning_rate,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "lambda_temp": self.lambda_temp,
            "reg_target": self.reg_target,
            "residual_mode": self.residual_mode,
            "keyframe_interval": self.keyframe_interval,
            "warm_start": self.warm_start,
            "warm_iterations": self.warm_iterations,
            "warm_learning_rate": self.warm_learning_rate,
            "finetune_learning_rate": self.finetune_learning_rate,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class FitResult:
    """Optimized unique tokens plus bookkeeping for one fitted tubelet position."""

    unique_per_clip: list
    loss_trace: np.ndarray
    final_mse: float
    weight_delta_l1: float
    fit_seconds: float = 0.0


@dataclass
class AdamState:
    """First/second moment accumulators for one parameter array."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros_like(cls, param: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(param), np.zeros_like(param))


def adam_step(
    param: np.ndarray,
    grad: np.ndarray,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> np.ndarray:
    """One bias-corrected Adam update; mutates ``state`` and returns the new values."""
    if not np.all(np.isfinite(grad)):
        raise DivergenceError("non-finite gradient in Adam step")
    state.step += 1
    state.m = beta1 * state.m + (1.0 - beta1) * grad
    state.v = beta2 * state.v + (1.0 - beta2) * np.square(grad)
    m_hat = state.m / (1.0 - beta1**state.step)
    v_hat = state.v / (1.0 - beta2**state.step)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps)


class _AdamGroup:
    """Adam over a flat list of arrays, updated together each step."""

    def __init__(self, params: list, cfg: EncoderConfig, lr: float | None = None):
        self.params = [np.array(p) for p in params]
        self.states = [AdamState.zeros_like(p) for p in self.params]
        self.cfg = cfg
        self.lr = cfg.learning_rate if lr is None else lr

    def step(self, grads: list):
        c = self.cfg
        for i, g in enumerate(grads):
            self.params[i] = adam_step(
                self.params[i], g, self.states[i], self.lr, c.beta1, c.beta2, c.eps
            )


def _check_finite_loss(loss: float, context: str):
    if not np.isfinite(loss):
        raise DivergenceError(f"loss became non-finite during {context}")


@dataclass
class PretrainResult:
    base: list
    loss_trace: np.ndarray


def pretrain_base(
    corpus: list,
    config: HypoNetConfig,
    epochs: int,
    learning_rate: float = 1e-3,
    seed: int = 0,
) -> PretrainResult:
    """Jointly optimize shared base parameters and per-tubelet tokens on a corpus.

    Each epoch is one full-batch Adam step on the mean squared error over the
    whole corpus.  Only the base parameters are returned; they are installed in
    the decoder and excluded from every bitrate count.
    """
    if not corpus:
        raise ConfigurationError("pretraining corpus is empty")
    expect = (config.clip_len, 3, config.patch_h, config.patch_w)
    for i, tub in enumerate(corpus):
        if tub.shape != expect:
            raise ConfigurationError(f"corpus tubelet {i} has shape {tub.shape}; expected {expect}")
    rng = np.random.default_rng(seed)
    base = init_base(config, rng)
    uniques = [init_unique(config) for _ in corpus]
    mod_layers = config.modulated_layers()

    cfg = EncoderConfig(iterations=max(epochs, 1), learning_rate=learning_rate, seed=seed)
    flat = [base[l].weight for l in range(config.num_layers)]
    flat += [base[l].bias for l in range(config.num_layers)]
    for u in uniques:
        flat += [u[l] for l in mod_layers]
    opt = _AdamGroup(flat, cfg)

    nl = config.num_layers
    trace = np.zeros(epochs, dtype=np.float64)
    for epoch in range(epochs):
        base = [
            replace(base[l], weight=opt.params[l], bias=opt.params[nl + l]) for l in range(nl)
        ]
        grads = [np.zeros_like(p) for p in opt.params]
        total = 0.0
        k = 2 * nl
        for item, tub in enumerate(corpus):
            unique = [None] * nl
            for l in mod_layers:
                unique[l] = opt.params[k]
                k += 1
            params = ParamSet(config, base, unique)
            mse, gt, gb = clip_mse_and_gradients(config, params, tub, wrt_base=True)
            total += mse
            for l in range(nl):
                grads[l] += gb[l][0] / len(corpus)
                grads[nl + l] += gb[l][1] / len(corpus)
            kk = k - len(mod_layers)
            for l in mod_layers:
                grads[kk] = gt[l] / len(corpus)
                kk += 1
        trace[epoch] = total / len(corpus)
        _check_finite_loss(trace[epoch], "base pretraining")
        opt.step(grads)

    base = [replace(base[l], weight=opt.params[l], bias=opt.params[nl + l]) for l in range(nl)]
    return PretrainResult(base=base, loss_trace=trace)


def fit_unique(
    tubelet: np.ndarray,
    base: list,
    init_tokens: list,
    cfg: EncoderConfig,
    config: HypoNetConfig,
) -> FitResult:
    """Adam descent on clip MSE with respect to the unique tokens only."""
    t0 = time.perf_counter()
    mod_layers = config.modulated_layers()
    tokens = [None if init_tokens[l] is None else np.array(init_tokens[l]) for l in range(config.num_layers)]
    opt = _AdamGroup([tokens[l] for l in mod_layers], cfg)
    trace = np.zeros(cfg.iterations, dtype=np.float64)
    mse = np.nan
    for it in range(cfg.iterations):
        for j, l in enumerate(mod_layers):
            tokens[l] = opt.params[j]
        params = ParamSet(config, base, tokens)
        mse, gt, _ = clip_mse_and_gradients(config, params, tubelet)
        trace[it] = mse
        _check_finite_loss(mse, "unique-token fitting")
        opt.step([gt[l] for l in mod_layers])
    for j, l in enumerate(mod_layers):
        tokens[l] = opt.params[j]
    mse = clip_mse_and_gradients(config, ParamSet(config, base, tokens), tubelet)[0]
    return FitResult(
        unique_per_clip=[tokens],
        loss_trace=trace,
        final_mse=float(mse),
        weight_delta_l1=0.0,
        fit_seconds=time.perf_counter() - t0,
    )


def _reg_weight_vectors(config: HypoNetConfig, psets: list, target: str) -> list:
    """Per-clip list of per-layer arrays the L1 coherence term is measured on."""
    out = []
    for ps in psets:
        layers = []
        if target in ("modulated", "both"):
            layers += [ps.modulated[l].weight for l in range(config.num_layers)]
        if target in ("unique", "both"):
            layers += [ps.unique[l] for l in config.modulated_layers()]
        out.append(layers)
    return out


def weight_delta_l1(config: HypoNetConfig, psets: list, target: str = "modulated") -> float:
    """Raw sum of |theta_i - theta_{i+1}| over consecutive clips."""
    vecs = _reg_weight_vectors(config, psets, target)
    total = 0.0
    for a, b in zip(vecs, vecs[1:]):
        total += sum(float(np.abs(x - y).sum()) for x, y in zip(a, b))
    return total


def fit_sequence_with_coherence(
    tubelets: list,
    base: list,
    cfg: EncoderConfig,
    config: HypoNetConfig,
) -> FitResult:
    """Fit all clips of one tubelet position, then finetune them jointly.

    Stage 1 fits each clip independently (warm-started from its predecessor
    unless ``cfg.warm_start`` is off).  Stage 2 runs ``finetune_iterations`` of
    joint Adam on the combined reconstruction + coherence objective; with
    ``lambda_temp == 0`` it degrades to continued reconstruction descent.
    """
    if not tubelets:
        raise ConfigurationError("need at least one clip to fit")
    t0 = time.perf_counter()
    nl = config.num_layers
    mod_layers = config.modulated_layers()
    n_clips = len(tubelets)

    tokens_per_clip = []
    init = init_unique(config)
    for idx, tub in enumerate(tubelets):
        # warm-started clips only adjust the inherited solution, which keeps
        # clip-to-clip residuals small even before the coherence finetune
        if idx == 0 or not cfg.warm_start:
            stage1 = cfg
        else:
            stage1 = replace(
                cfg,
                iterations=cfg.effective_warm_iterations,
                learning_rate=cfg.effective_warm_lr,
            )
        res = fit_unique(tub, base, init, stage1, config)
        tokens_per_clip.append(res.unique_per_clip[0])
        if cfg.warm_start:
            init = tokens_per_clip[-1]
        else:
            init = init_unique(config)

    # total entry count normalizes the L1 term so lambda is size-independent
    if cfg.reg_target == "unique":
        reg_entries = config.unique_param_count()
    else:
        reg_entries = sum(config.weight_size(l) for l in range(nl))
        if cfg.reg_target == "both":
            reg_entries += config.unique_param_count()

    flat = []
    for toks in tokens_per_clip:
        flat += [toks[l] for l in mod_layers]
    opt = _AdamGroup(flat, cfg, lr=cfg.effective_finetune_lr)

    trace = np.zeros(cfg.finetune_iterations, dtype=np.float64)
    final_mses = [np.nan] * n_clips
    for it in range(cfg.finetune_iterations):
        psets = []
        k = 0
        for _ in range(n_clips):
            unique = [None] * nl
            for l in mod_layers:
                unique[l] = opt.params[k]
                k += 1
            psets.append(ParamSet(config, base, unique))

        grads = []
        loss = 0.0
        token_grads = []
        for i in range(n_clips):
            mse, gt, _ = clip_mse_and_gradients(config, psets[i], tubelets[i])
            final_mses[i] = mse
            loss += mse
            token_grads.append(gt)

        if cfg.lambda_temp > 0 and n_clips > 1:
            scale = cfg.lambda_temp / reg_entries
            if cfg.reg_target in ("modulated", "both"):
                mod_w = [[ps.modulated[l].weight for l in range(nl)] for ps in psets]
                for i in range(n_clips):
                    gmod = [np.zeros_like(mod_w[i][l]) for l in range(nl)]
                    for j in (i - 1, i + 1):
                        if 0 <= j < n_clips:
                            for l in range(nl):
                                d = mod_w[i][l] - mod_w[j][l]
                                if j > i:
                                    loss += scale * float(np.abs(d).sum())
                                gmod[l] += scale * np.sign(d)
                    extra, _ = modulated_grads_to_unique(
                        config,
                        psets[i],
                        [(gmod[l], np.zeros_like(psets[i].base[l].bias)) for l in range(nl)],
                    )
                    for l in mod_layers:
                        token_grads[i][l] = token_grads[i][l] + extra[l]
            if cfg.reg_target in ("unique", "both"):
                for i in range(n_clips):
                    for l in mod_layers:
                        for j in (i - 1, i + 1):
                            if 0 <= j < n_clips:
                                d = psets[i].unique[l] - psets[j].unique[l]
                                if j > i:
                                    loss += scale * float(np.abs(d).sum())
                                token_grads[i][l] = token_grads[i][l] + scale * np.sign(d)

        trace[it] = loss
        _check_finite_loss(loss, "coherence finetuning")
        for i in range(n_clips):
            grads += [token_grads[i][l] for l in mod_layers]
        opt.step(grads)

    tokens_per_clip = []
    k = 0
    for _ in range(n_clips):
        unique = [None] * nl
        for l in mod_layers:
            unique[l] = opt.params[k]
            k += 1
        tokens_per_clip.append(unique)

    psets = [ParamSet(config, base, u) for u in tokens_per_clip]
    final_mses = [
        clip_mse_and_gradients(config, psets[i], tubelets[i])[0] for i in range(n_clips)
    ]
    delta = weight_delta_l1(config, psets, cfg.reg_target)
    return FitResult(
        unique_per_clip=tokens_per_clip,
        loss_trace=trace,
        final_mse=float(np.mean(final_mses)),
        weight_delta_l1=delta,
        fit_seconds=time.perf_counter() - t0,
    )


def unique_payload(config: HypoNetConfig, unique: list) -> list:
    """Strip unmodulated layers: the per-clip arrays that actually get transmitted."""
    return [unique[l] for l in config.modulated_layers()]


def payload_unique(config: HypoNetConfig, arrays: list) -> list:
    """Inverse of :func:`unique_payload`: rebuild the full per-layer list."""
    out = [None] * config.num_layers
    for arr, l in zip(arrays, config.modulated_layers()):
        out[l] = arr.reshape(config.token_counts[l], config.token_dims[l])
    return out


def compute_residual_stream(
    unique_sequence: list,
    config: HypoNetConfig,
    mode: str,
    keyframe_interval: int | None = None,
    bits: int | None = None,
    position_id: int = 0,
):
    """Turn a per-clip unique-token sequence into a (possibly quantized) residual stream.

    ``unique_sequence`` lists full per-layer token lists (as in FitResult);
    with ``bits=None`` residuals are exact and decoding reproduces the inputs
    bitwise, otherwise the closed-loop quantized recursion applies.
    """
    payload = [unique_payload(config, u) for u in unique_sequence]
    return bitstream.encode_stream(payload, mode, bits, keyframe_interval, position_id)
