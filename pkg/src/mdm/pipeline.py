"""End-to-end training and sampling for the two-modality latent diffusion model.

Training runs, per step: embed and variationally encode each modality, jump
the clean latents to a shared random noise level t, wrap them with
pad/time/class tokens, push the sequences through the scan-block stack, and
read two heads off the content features: a clean-state head (drives both
reconstruction losses) and a bilinear score head (drives the score-entropy
loss against candidate clean states).  The total objective is

    L = L_rec^img + L_rec^txt + beta * L_KL + lambda * L_se

optimized with AdamW (weight decay zero by default) plus an EMA shadow of
every parameter.  All gradients are analytic; there is no autograd anywhere.

Sampling initializes image and text latent sequences from N(0, I) and
integrates the probability-flow ODE backward with second-order solver steps.
Each step re-estimates the clean state through the block stack, mixes the
conditional and null-class estimates when guidance is enabled, and only
updates the items picked by the per-step score-entropy selection.

Checkpoints are a single JSON header line (config, step counter, generator
state) followed by a tensor container holding parameters, both Adam moments,
and the EMA shadow; save -> load -> resume replays the uninterrupted loss
trajectory bit-exactly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional

import numpy as np

from .codec import (
    ROLE_CONTENT,
    CodecConfig,
    LatentSequence,
    decode_image,
    decode_image_loss_back,
    decode_text,
    decode_text_loss_back,
    embed_image,
    embed_image_back,
    embed_text,
    embed_text_back,
    encode_latent,
    encode_latent_back,
    init_codec_params,
    insert_padding_tokens,
    kl_loss,
    kl_loss_back,
    padding_token_grads,
)
from .container import ContainerFormatError, parse_tensors, serialize_tensors
from .diffusion import (
    NoiseSchedule,
    build_schedule,
    dpm_solver_step,
    forward_diffuse,
)
from .mamba import (
    block_features,
    candidate_f_values_back,
    full_sequence_perms,
    make_scan_orders,
    mamba_block_gradients,
    score_items,
    select_items,
)
from .numerics import ArgumentError, NumericsError, RngState

MODALITIES = ("image", "text")


@dataclass
class TrainConfig:
    # model dims (desk scale)
    d_model: int = 64
    d_inner: int = 32
    d_state: int = 16
    k_conv: int = 3
    n_blocks: int = 4
    # data
    image_hw: int = 8
    channels: int = 1
    patch: int = 2
    vocab: int = 256
    num_classes: int = 2
    text_len: int = 16
    # diffusion
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    # objective
    beta_kl: float = 1e-2
    lambda_se: float = 1.0
    n_candidates: int = 4
    temper: Optional[float] = None  # None -> 2 / d_model
    extra_noise: bool = True
    # optimizer
    learning_rate: float = 1e-4
    weight_decay: float = 0.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    ema_decay: float = 0.9999
    cfg_drop: float = 0.1
    # run shape
    steps: int = 2000
    batch: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ArgumentError(
                f"TrainConfig: learning_rate must be > 0, got {self.learning_rate}")
        if not (0.0 <= self.ema_decay < 1.0):
            raise ArgumentError(
                f"TrainConfig: ema_decay must lie in [0, 1), got {self.ema_decay}")
        if self.beta_kl < 0 or self.lambda_se < 0:
            raise ArgumentError(
                f"TrainConfig: beta_kl and lambda_se must be >= 0, got "
                f"{self.beta_kl}, {self.lambda_se}")
        if self.weight_decay < 0:
            raise ArgumentError(
                f"TrainConfig: weight_decay must be >= 0, got {self.weight_decay}")
        if not (2 <= self.n_candidates <= 8):
            raise ArgumentError(
                f"TrainConfig: n_candidates must lie in [2, 8], got {self.n_candidates}")
        if not (0.0 <= self.cfg_drop <= 1.0):
            raise ArgumentError(
                f"TrainConfig: cfg_drop must lie in [0, 1], got {self.cfg_drop}")

    @property
    def temper_value(self) -> float:
        return self.temper if self.temper is not None else 2.0 / self.d_model


def codec_config(cfg: TrainConfig) -> CodecConfig:
    return CodecConfig(image_hw=cfg.image_hw, channels=cfg.channels,
                       patch=cfg.patch, latent_dim=cfg.d_model, vocab=cfg.vocab,
                       num_classes=cfg.num_classes, max_text=cfg.text_len)


# ---------------------------------------------------------------------------
# parameter initialization

def _inverse_softplus(y: np.ndarray) -> np.ndarray:
    return np.log(np.expm1(y))


def init_block_params(cfg: TrainConfig, rng: RngState, *,
                      zero_residual: bool = True) -> Dict[str, np.ndarray]:
    dm, di, ds = cfg.d_model, cfg.d_inner, cfg.d_state

    def w(shape, scale):
        return rng.normal(shape) * scale

    # timescales log-uniform in [1e-3, 1e-1], stored pre-softplus
    delta = np.exp(rng.uniform((ds,)) * (np.log(1e-1) - np.log(1e-3)) + np.log(1e-3))
    block = {
        "norm_g": np.ones(dm),
        "in_w": w((dm, di), 1.0 / np.sqrt(dm)),
        "in_b": np.zeros(di),
        "conv_w": w((cfg.k_conv, di), 1.0 / np.sqrt(cfg.k_conv)),
        "conv_b": np.zeros(di),
        # a fixed negative ladder keeps every discretized pole inside the
        # unit circle from the first step
        "A": -(1.0 + np.arange(ds, dtype=np.float64)),
        "B": w((ds, di), 1.0 / np.sqrt(ds)),
        "C": w((di, ds), 1.0 / np.sqrt(ds)),
        "D": np.ones(di),
        "delta_raw": _inverse_softplus(delta),
        "out_w": np.zeros((di, dm)) if zero_residual else w((di, dm), 1.0 / np.sqrt(di)),
        "out_b": np.zeros(dm),
    }
    return block


def init_params(cfg: TrainConfig, rng: RngState, *,
                zero_residual: bool = True) -> Dict[str, np.ndarray]:
    """All trainable tensors in one flat dict, float64.

    Keys: the codec names, block{i}/<name> per scan block, and head/{z0_w,
    z0_b, score_w}.  zero_residual starts every block as the identity map so
    early training is dominated by the codec path.
    """
    params = {k: v.astype(np.float64)
              for k, v in init_codec_params(codec_config(cfg), rng, dtype=np.float64).items()}
    for i in range(cfg.n_blocks):
        for k, v in init_block_params(cfg, rng, zero_residual=zero_residual).items():
            params[f"block{i}/{k}"] = v
    dm = cfg.d_model
    params["head/z0_w"] = rng.normal((dm, dm)) / np.sqrt(dm)
    params["head/z0_b"] = np.zeros(dm)
    params["head/score_w"] = rng.normal((dm, dm)) * (0.1 / np.sqrt(dm))
    return params


def _block_view(params: Dict[str, np.ndarray], i: int) -> Dict[str, np.ndarray]:
    pre = f"block{i}/"
    return {k[len(pre):]: v for k, v in params.items() if k.startswith(pre)}


def _heads_view(params: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    return {"z0_w": params["head/z0_w"], "z0_b": params["head/z0_b"],
            "score_w": params["head/score_w"]}


# ---------------------------------------------------------------------------
# losses

def total_loss(rec_img: float, rec_txt: float, kl: float, se: float,
               beta_kl: float, lambda_se: float) -> float:
    """L = L_rec^img + L_rec^txt + beta * L_KL + lambda * L_se."""
    parts = (rec_img, rec_txt, kl, se, beta_kl, lambda_se)
    if not all(np.isfinite(p) for p in parts):
        raise ArgumentError(f"total_loss: non-finite component in {parts}")
    return float(rec_img + rec_txt + beta_kl * kl + lambda_se * se)


def make_candidates(z0_hat: np.ndarray, z0: np.ndarray, z_t: np.ndarray,
                    count: int) -> np.ndarray:
    """Candidate clean states per content item, shape [..., n, count, d].

    Slot 0 is the model's clean estimate (a target here, never a gradient
    path), slot 1 the true clean state, and the remaining slots walk from the
    clean state toward the current noisy state.
    """
    if count < 2:
        raise ArgumentError(f"make_candidates: need at least 2 slots, got {count}")
    cands = [z0_hat, z0]
    extra = count - 2
    for j in range(1, extra + 1):
        w = j / extra
        cands.append((1.0 - w) * z0 + w * z_t)
    return np.stack(cands, axis=-2)


def _validate_batch(cfg: TrainConfig, batch: Dict[str, np.ndarray]) -> int:
    for key in ("images", "token_ids", "class_ids"):
        if key not in batch:
            raise ArgumentError(f"batch is missing '{key}'")
    images = np.asarray(batch["images"])
    ids = np.asarray(batch["token_ids"])
    classes = np.asarray(batch["class_ids"])
    b = images.shape[0]
    want_img = (b, cfg.image_hw, cfg.image_hw, cfg.channels)
    if images.shape != want_img:
        raise ArgumentError(f"batch images shape {images.shape}, expected {want_img}")
    if ids.shape != (b, cfg.text_len):
        raise ArgumentError(
            f"batch token_ids shape {ids.shape}, expected {(b, cfg.text_len)}")
    if classes.shape != (b,):
        raise ArgumentError(f"batch class_ids shape {classes.shape}, expected {(b,)}")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab):
        raise ArgumentError(f"batch token_ids outside [0, {cfg.vocab})")
    if classes.size and (classes.min() < 0 or classes.max() >= cfg.num_classes):
        raise ArgumentError(f"batch class_ids outside [0, {cfg.num_classes})")
    return b


def draw_noises(cfg: TrainConfig, rng: RngState, batch_size: int) -> Dict[str, Dict[str, np.ndarray]]:
    """All per-step Gaussian draws, in a fixed order so runs replay exactly."""
    ccfg = codec_config(cfg)
    sizes = {"image": ccfg.n_image_content, "text": cfg.text_len}
    out = {}
    for modality in MODALITIES:
        shape = (batch_size, sizes[modality], cfg.d_model)
        out[modality] = {"eta": rng.normal(shape), "eps_enc": rng.normal(shape),
                         "eps_diff": rng.normal(shape)}
    return out


def _forward_modality(params: Dict[str, np.ndarray], cfg: TrainConfig,
                      sched: NoiseSchedule, modality: str,
                      batch: Dict[str, np.ndarray], t: float,
                      noises: Dict[str, np.ndarray], class_rows: np.ndarray,
                      targets: Optional[Dict[str, np.ndarray]] = None):
    """One modality's losses plus every intermediate the backward pass needs."""
    ccfg = codec_config(cfg)
    if modality == "image":
        emb, emb_cache = embed_image(params, np.asarray(batch["images"], dtype=np.float64),
                                     ccfg.patch)
        grid = ccfg.grid
    else:
        emb, emb_cache = embed_text(params, np.asarray(batch["token_ids"]))
        grid = None
    z0_seq, mu, sigma, enc_cache = encode_latent(
        params, emb, modality=modality, grid=grid, extra_noise=cfg.extra_noise,
        noises=(noises["eta"], noises["eps_enc"]))
    zt_seq = forward_diffuse(z0_seq, t, noises["eps_diff"], sched)

    # class rows differ per example, so the special tokens go on one by one
    b = zt_seq.vectors.shape[0]
    fulls = []
    for k in range(b):
        one = LatentSequence(vectors=zt_seq.vectors[k], roles=zt_seq.roles,
                             modality=modality, t=t, grid=grid)
        null = int(class_rows[k]) == cfg.num_classes
        fulls.append(insert_padding_tokens(
            params, one, t, class_id=None if null else int(class_rows[k]),
            null_class=null))
    roles = fulls[0].roles
    x = np.stack([f.vectors for f in fulls])

    n_content = zt_seq.vectors.shape[-2]
    orders = make_scan_orders(modality, grid=grid, length=n_content)
    perms = full_sequence_perms(roles, orders)
    block_caches = []
    for i in range(cfg.n_blocks):
        x, c = block_features(_block_view(params, i), x, perms, want_cache=True)
        block_caches.append(c)
    cmask = roles == ROLE_CONTENT
    feats_c = x[..., cmask, :]
    z0_hat = feats_c @ params["head/z0_w"] + params["head/z0_b"]

    content_roles = np.full(n_content, ROLE_CONTENT, dtype=np.int8)
    hat_seq = LatentSequence(vectors=z0_hat, roles=content_roles,
                             modality=modality, t=0.0, grid=grid)
    if modality == "image":
        _, rec, dec_cache = decode_image(params, hat_seq, ccfg,
                                         reference=np.asarray(batch["images"], dtype=np.float64))
    else:
        _, rec, dec_cache = decode_text(params, hat_seq,
                                        reference_ids=np.asarray(batch["token_ids"]))
    kl = kl_loss(mu, sigma)

    abar = sched.alpha_bar(t)
    if targets is not None:
        cands, r_pin = targets["cands"], targets["r_est"]
    else:
        cands = make_candidates(z0_hat, z0_seq.vectors, zt_seq.vectors,
                                cfg.n_candidates)
        r_pin = None
    _, s_pred, r_est, se_items = score_items(
        _heads_view(params), feats_c, zt_seq.vectors, cands, abar,
        cfg.temper_value, r_est=r_pin)
    se = float(np.mean(se_items))

    parts = {"rec": rec, "kl": kl, "se": se}
    cache = {"modality": modality, "emb_cache": emb_cache, "enc_cache": enc_cache,
             "mu": mu, "sigma": sigma, "abar": abar, "fulls": fulls,
             "cmask": cmask, "block_caches": block_caches, "feats_c": feats_c,
             "cands": cands, "s_pred": s_pred, "r_est": r_est,
             "dec_cache": dec_cache, "class_rows": class_rows}
    return parts, cache


def _accumulate(grads: Dict[str, np.ndarray], new: Dict) -> None:
    for k, v in new.items():
        if k == "special/class" and isinstance(v, tuple):
            row, vec = v
            grads[k][row] += vec
        else:
            grads[k] += v


def _backward_modality(params: Dict[str, np.ndarray], cfg: TrainConfig,
                       cache: Dict, grads: Dict[str, np.ndarray]) -> None:
    ccfg = codec_config(cfg)
    feats_c = cache["feats_c"]

    # reconstruction path through the clean-state head
    if cache["modality"] == "image":
        d_z0hat, dec_grads = decode_image_loss_back(params, cache["dec_cache"], ccfg)
    else:
        d_z0hat, dec_grads = decode_text_loss_back(params, cache["dec_cache"])
    _accumulate(grads, dec_grads)
    flat_f = feats_c.reshape(-1, feats_c.shape[-1])
    flat_dz = d_z0hat.reshape(-1, d_z0hat.shape[-1])
    grads["head/z0_w"] += flat_f.T @ flat_dz
    grads["head/z0_b"] += flat_dz.sum(axis=0)
    d_feats = d_z0hat @ params["head/z0_w"].T

    # score-entropy path; candidates and true ratios are targets, so the
    # gradient enters only through the predicted f-values
    if cfg.lambda_se > 0:
        s, r = cache["s_pred"], cache["r_est"]
        omega = 1.0 / (1.0 + r)
        d_s = omega * (1.0 - r / s) * (cfg.lambda_se / (s.size / s.shape[-1]))
        d_f = s * (d_s - np.sum(d_s * s, axis=-1, keepdims=True))
        d_feats_se, d_w = candidate_f_values_back(
            params["head/score_w"], feats_c, cache["cands"], d_f)
        grads["head/score_w"] += d_w
        d_feats = d_feats + d_feats_se

    cmask = cache["cmask"]
    d_x = np.zeros(cache["block_caches"][0]["x"].shape, dtype=np.float64)
    d_x[..., cmask, :] = d_feats
    for i in range(cfg.n_blocks - 1, -1, -1):
        d_x, bg = mamba_block_gradients(_block_view(params, i),
                                        cache["block_caches"][i], d_x)
        _accumulate(grads, {f"block{i}/{k}": v for k, v in bg.items()})

    for k, full in enumerate(cache["fulls"]):
        pg = padding_token_grads(full, d_x[k], int(cache["class_rows"][k]))
        _accumulate(grads, pg)

    d_zt = d_x[..., cmask, :]
    d_z0 = np.sqrt(cache["abar"]) * d_zt
    d_mu_kl, d_sig_kl = kl_loss_back(cache["mu"], cache["sigma"], cfg.beta_kl)
    d_emb, enc_grads = encode_latent_back(params, cache["enc_cache"], d_z0,
                                          d_mu_kl, d_sig_kl)
    _accumulate(grads, enc_grads)
    if cache["modality"] == "image":
        _accumulate(grads, embed_image_back(params, cache["emb_cache"], d_emb))
    else:
        _accumulate(grads, embed_text_back(params, cache["emb_cache"], d_emb))


def _combine_parts(cfg: TrainConfig, parts: Dict[str, Dict[str, float]]) -> Dict[str, float]:
    kl = parts["image"]["kl"] + parts["text"]["kl"]
    se = parts["image"]["se"] + parts["text"]["se"]
    return {
        "loss_rec_img": parts["image"]["rec"],
        "loss_rec_txt": parts["text"]["rec"],
        "loss_kl": kl,
        "loss_se": se,
        "loss_total": total_loss(parts["image"]["rec"], parts["text"]["rec"],
                                 kl, se, cfg.beta_kl, cfg.lambda_se),
    }


def training_targets(params: Dict[str, np.ndarray], cfg: TrainConfig,
                     sched: NoiseSchedule, batch: Dict[str, np.ndarray],
                     t: float, noises: Dict[str, Dict[str, np.ndarray]],
                     class_rows: np.ndarray) -> Dict[str, Dict[str, np.ndarray]]:
    """The score targets the training forward would build at these params.

    Each modality gets its candidate set and the tempered true-ratio
    estimates against it.  The objective treats both as constants (no
    gradient flows into them), so pinning them explicitly makes the loss an
    ordinary differentiable function of the parameters.
    """
    out = {}
    for modality in MODALITIES:
        _, cache = _forward_modality(params, cfg, sched, modality, batch, t,
                                     noises[modality], class_rows)
        out[modality] = {"cands": cache["cands"], "r_est": cache["r_est"]}
    return out


def batch_losses(params: Dict[str, np.ndarray], cfg: TrainConfig,
                 sched: NoiseSchedule, batch: Dict[str, np.ndarray], t: float,
                 noises: Dict[str, Dict[str, np.ndarray]],
                 class_rows: np.ndarray,
                 targets: Optional[Dict[str, Dict[str, np.ndarray]]] = None) -> Dict[str, float]:
    """Forward-only loss evaluation (no gradients)."""
    _validate_batch(cfg, batch)
    parts = {}
    for modality in MODALITIES:
        parts[modality], _ = _forward_modality(
            params, cfg, sched, modality, batch, t, noises[modality], class_rows,
            None if targets is None else targets[modality])
    return _combine_parts(cfg, parts)


def loss_and_grads(params: Dict[str, np.ndarray], cfg: TrainConfig,
                   sched: NoiseSchedule, batch: Dict[str, np.ndarray], t: float,
                   noises: Dict[str, Dict[str, np.ndarray]],
                   class_rows: np.ndarray,
                   targets: Optional[Dict[str, Dict[str, np.ndarray]]] = None):
    """Deterministic forward + analytic backward for one batch at one t.

    All stochastic inputs (t, the encoder and diffusion noises, the guidance
    class-row assignment) are arguments, which is what makes training steps
    replayable.  When targets is None each modality scores against the
    candidate set and ratio estimates built from its own forward pass,
    treated as constants.  Returns (losses, grads); losses holds the
    unweighted parts and the weighted total.
    """
    _validate_batch(cfg, batch)
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    parts = {}
    for modality in MODALITIES:
        p, cache = _forward_modality(
            params, cfg, sched, modality, batch, t, noises[modality], class_rows,
            None if targets is None else targets[modality])
        parts[modality] = p
        _backward_modality(params, cfg, cache, grads)
    return _combine_parts(cfg, parts), grads


def gradient_check(cfg: Optional[TrainConfig] = None, *,
                   coords_per_tensor: int = 40, h: float = 1e-5,
                   seed: int = 0) -> Dict[str, float]:
    """Finite-difference audit of every trainable tensor.

    Runs one forward/backward at a small fixed scale (4x4 images, 4-token
    captions by default), pins the score targets so the loss is an ordinary
    function of the parameters, then compares each analytic gradient against
    centered differences at up to coords_per_tensor coordinates per tensor
    (every coordinate for tensors at most that large).  Returns {tensor
    name: max relative error} ordered by name.  seed fixes the batch, the
    noise draws, and the coordinate sample, so reports are reproducible.
    """
    if coords_per_tensor < 1:
        raise ArgumentError(
            f"gradient_check: coords_per_tensor must be >= 1, got {coords_per_tensor}")
    if not (0.0 < h < 1.0):
        raise ArgumentError(f"gradient_check: h must lie in (0, 1), got {h}")
    if cfg is None:
        cfg = TrainConfig(d_model=8, d_inner=6, d_state=4, k_conv=3, n_blocks=2,
                          image_hw=4, patch=2, vocab=12, num_classes=2,
                          text_len=4, T=50, n_candidates=3, beta_kl=0.05,
                          lambda_se=0.7, batch=2, seed=seed)
    rng = RngState(seed)
    b = cfg.batch
    batch = {
        "images": rng.uniform((b, cfg.image_hw, cfg.image_hw, cfg.channels)),
        "token_ids": rng.integers(0, cfg.vocab, (b, cfg.text_len)),
        "class_ids": np.arange(b, dtype=np.int64) % cfg.num_classes,
    }
    # random residual weights: identity-initialized blocks would hide any
    # gradient error behind zeros
    params = init_params(cfg, rng.child(1), zero_residual=False)
    sched = build_schedule(T=cfg.T, beta_start=cfg.beta_start, beta_end=cfg.beta_end)
    t = float(max(1, round(0.6 * cfg.T)))
    noises = draw_noises(cfg, rng, b)
    class_rows = np.asarray(batch["class_ids"]).copy()
    class_rows[-1] = cfg.num_classes  # one null row audits the guidance path
    targets = training_targets(params, cfg, sched, batch, t, noises, class_rows)
    _, grads = loss_and_grads(params, cfg, sched, batch, t, noises, class_rows,
                              targets)

    def loss() -> float:
        return batch_losses(params, cfg, sched, batch, t, noises, class_rows,
                            targets)["loss_total"]

    coord_rng = np.random.default_rng(seed)
    report: Dict[str, float] = {}
    for name in sorted(params):
        arr = params[name]
        if arr.size <= coords_per_tensor:
            coords = list(np.ndindex(arr.shape))
        else:
            flat = coord_rng.choice(arr.size, size=coords_per_tensor, replace=False)
            coords = [np.unravel_index(int(i), arr.shape) for i in flat]
        numeric = np.zeros(len(coords))
        for ci, idx in enumerate(coords):
            orig = arr[idx]
            arr[idx] = orig + h
            fp = loss()
            arr[idx] = orig - h
            fm = loss()
            arr[idx] = orig
            numeric[ci] = (fp - fm) / (2.0 * h)
        analytic = np.array([grads[name][idx] for idx in coords])
        scale = max(float(np.max(np.abs(numeric))), 1e-6)
        report[name] = float(np.max(np.abs(analytic - numeric))) / scale
    return report


# ---------------------------------------------------------------------------
# optimizer and training state

@dataclass
class TrainState:
    cfg: TrainConfig
    params: Dict[str, np.ndarray]
    opt_m: Dict[str, np.ndarray]
    opt_v: Dict[str, np.ndarray]
    ema: Dict[str, np.ndarray]
    step: int
    rng: RngState
    sched: NoiseSchedule = field(repr=False)


def init_state(cfg: TrainConfig) -> TrainState:
    rng = RngState(cfg.seed)
    params = init_params(cfg, rng)
    return TrainState(
        cfg=cfg,
        params=params,
        opt_m={k: np.zeros_like(v) for k, v in params.items()},
        opt_v={k: np.zeros_like(v) for k, v in params.items()},
        ema={k: v.copy() for k, v in params.items()},
        step=0,
        rng=rng,
        sched=build_schedule(T=cfg.T, beta_start=cfg.beta_start, beta_end=cfg.beta_end),
    )


def adam_update(state: TrainState, grads: Dict[str, np.ndarray]) -> None:
    """One AdamW step (decoupled decay, zero by default) plus the EMA update."""
    cfg = state.cfg
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    t = state.step  # already advanced by the caller; 1-based
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for k, p in state.params.items():
        g = grads[k]
        state.opt_m[k] = b1 * state.opt_m[k] + (1.0 - b1) * g
        state.opt_v[k] = b2 * state.opt_v[k] + (1.0 - b2) * g * g
        m_hat = state.opt_m[k] / bc1
        v_hat = state.opt_v[k] / bc2
        if cfg.weight_decay > 0:
            p -= cfg.learning_rate * cfg.weight_decay * p
        p -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
    # increment form: exact fixed point when the shadow already equals p
    d = cfg.ema_decay
    for k, p in state.params.items():
        state.ema[k] = state.ema[k] + (1.0 - d) * (p - state.ema[k])


def train_step(state: TrainState, batch: Dict[str, np.ndarray],
               rng: Optional[RngState] = None) -> Dict[str, float]:
    """One optimization step; mutates state in place and returns the metrics
    row (step plus the loss parts).  Draw order from the generator is fixed:
    t, image noises, text noises, guidance drops."""
    cfg = state.cfg
    rng = rng if rng is not None else state.rng
    b = _validate_batch(cfg, batch)
    t = float(rng.integers(1, cfg.T + 1))
    noises = draw_noises(cfg, rng, b)
    drop = rng.uniform((b,)) < cfg.cfg_drop
    class_rows = np.where(drop, cfg.num_classes, np.asarray(batch["class_ids"]))
    losses, grads = loss_and_grads(state.params, cfg, state.sched, batch, t,
                                   noises, class_rows)
    if not np.isfinite(losses["loss_total"]):
        raise NumericsError(
            f"train_step: non-finite loss at step {state.step + 1}, t={t}: {losses}")
    state.step += 1
    adam_update(state, grads)
    out = {"step": float(state.step)}
    out.update(losses)
    return out


# ---------------------------------------------------------------------------
# sampling

def _stack_features(params: Dict[str, np.ndarray], n_blocks: int, x: np.ndarray,
                    perms, scan_mode: str) -> np.ndarray:
    for i in range(n_blocks):
        x, _ = block_features(_block_view(params, i), x, perms, scan_mode=scan_mode)
    return x


def _time_grid(T: int, t_min: float, steps: int) -> np.ndarray:
    """Quadratic spacing from T down to t_min: dense near the clean end."""
    u = np.linspace(1.0, 0.0, steps + 1)
    return t_min + (T - t_min) * u**2


def _generate_modality(params: Dict[str, np.ndarray], cfg: TrainConfig,
                       sched: NoiseSchedule, rng: RngState, modality: str,
                       class_id: Optional[int], *, steps: int, guidance: float,
                       t_min: float, select_frac: float, n_samples: int,
                       scan_mode: str):
    ccfg = codec_config(cfg)
    if modality == "image":
        n, grid = ccfg.n_image_content, ccfg.grid
    else:
        n, grid = cfg.text_len, None
    roles_c = np.full(n, ROLE_CONTENT, dtype=np.int8)
    orders = make_scan_orders(modality, grid=grid, length=n)
    heads = _heads_view(params)
    j = int(np.ceil(select_frac * n))
    mix = guidance if class_id is not None else 1.0

    def clean_estimate(vectors: np.ndarray, tt: float):
        """Content features and the (guidance-mixed) clean-state estimate."""
        cseq = LatentSequence(vectors=vectors, roles=roles_c, modality=modality,
                              t=tt, grid=grid)

        def one(null: bool):
            full = insert_padding_tokens(
                params, cseq, tt, class_id=None if null else class_id,
                null_class=null)
            perms = full_sequence_perms(full.roles, orders)
            feats = _stack_features(params, cfg.n_blocks, full.vectors, perms,
                                    scan_mode)
            fc = feats[..., full.roles == ROLE_CONTENT, :]
            return fc, fc @ heads["z0_w"] + heads["z0_b"]

        if class_id is None:
            return one(True)
        fc_c, z0_c = one(False)
        if mix == 1.0:
            return fc_c, z0_c
        _, z0_u = one(True)
        return fc_c, z0_u + mix * (z0_c - z0_u)

    z = rng.normal((n_samples, n, cfg.d_model))
    seq = LatentSequence(vectors=z, roles=roles_c, modality=modality,
                         t=float(sched.T), grid=grid)
    ts = _time_grid(sched.T, t_min, steps)
    for i in range(steps):
        t_cur, t_next = float(ts[i]), float(ts[i + 1])
        fc, z0h = clean_estimate(seq.vectors, t_cur)
        cands = np.stack([z0h, seq.vectors], axis=-2)
        _, _, _, se_items = score_items(heads, fc, seq.vectors, cands,
                                        sched.alpha_bar(t_cur), cfg.temper_value)
        mask = np.stack([select_items(se_items[s], "top_j", j=j)
                         for s in range(n_samples)])

        def drift(s_seq: LatentSequence, tt: float) -> np.ndarray:
            abar = sched.alpha_bar(tt)
            beta = sched.beta(tt)
            _, z0h_tt = clean_estimate(s_seq.vectors, tt)
            zc = s_seq.vectors
            dr = (-(beta / 2.0) * zc
                  + (beta / 2.0) * (zc - np.sqrt(abar) * z0h_tt) / (1.0 - abar))
            return dr * mask[..., None]

        seq = dpm_solver_step(drift, seq, t_cur, t_cur - t_next, step_index=i)

    _, z0_final = clean_estimate(seq.vectors, float(ts[-1]))
    final = LatentSequence(vectors=z0_final, roles=roles_c, modality=modality,
                           t=0.0, grid=grid)
    if modality == "image":
        image, _, _ = decode_image(params, final, ccfg)
        return image
    ids, _, _ = decode_text(params, final)
    return ids


def generate(params: Dict[str, np.ndarray], cfg: TrainConfig, rng: RngState, *,
             class_id: Optional[int] = None,
             prompt_tokens: Optional[np.ndarray] = None, steps: int = 20,
             guidance: float = 2.0, t_min: float = 1.0,
             select_frac: float = 0.75, n_samples: int = 1,
             sched: Optional[NoiseSchedule] = None,
             scan_mode: str = "parallel"):
    """Sample images and captions, shapes [n_samples, H, W, C] and
    [n_samples, text_len].

    Both modalities integrate the reverse ODE independently, conditioned on
    the class token; guidance mixes the conditional and null-class clean
    estimates (guidance == 1 or class_id == None short-circuits to a single
    path).  Per step, only the items with the smallest score entropies (a
    select_frac fraction) receive the update.  prompt_tokens pins the caption
    instead: the text content is the deterministic encoding of the prompt and
    the returned ids are its round trip, while the image is still driven by
    the class token.  All randomness comes from rng (image latents first,
    then text), so a fixed seed gives bit-identical output.
    """
    if not (1 <= steps <= cfg.T):
        raise ArgumentError(f"generate: steps={steps} outside [1, {cfg.T}]")
    if class_id is not None and not (0 <= class_id < cfg.num_classes):
        raise ArgumentError(
            f"generate: class_id={class_id} outside [0, {cfg.num_classes})")
    if not (0.0 < t_min < cfg.T):
        raise ArgumentError(f"generate: t_min={t_min} outside (0, {cfg.T})")
    if not (0.0 < select_frac <= 1.0):
        raise ArgumentError(
            f"generate: select_frac={select_frac} outside (0, 1]")
    if n_samples < 1:
        raise ArgumentError(f"generate: n_samples must be >= 1, got {n_samples}")
    sched = sched if sched is not None else build_schedule(
        T=cfg.T, beta_start=cfg.beta_start, beta_end=cfg.beta_end)

    common = dict(steps=steps, guidance=guidance, t_min=t_min,
                  select_frac=select_frac, n_samples=n_samples,
                  scan_mode=scan_mode)
    images = _generate_modality(params, cfg, sched, rng, "image", class_id,
                                **common)
    if prompt_tokens is None:
        ids = _generate_modality(params, cfg, sched, rng, "text", class_id,
                                 **common)
    else:
        prompt = np.asarray(prompt_tokens)
        if prompt.shape != (cfg.text_len,):
            raise ArgumentError(
                f"generate: prompt_tokens shape {prompt.shape}, expected "
                f"{(cfg.text_len,)}")
        emb, _ = embed_text(params, prompt)
        mu = emb @ params["enc/mu_w"] + params["enc/mu_b"]
        latents = np.broadcast_to(mu, (n_samples,) + mu.shape).copy()
        roles_c = np.full(cfg.text_len, ROLE_CONTENT, dtype=np.int8)
        final = LatentSequence(vectors=latents, roles=roles_c, modality="text", t=0.0)
        ids, _, _ = decode_text(params, final)
    return images, ids


# ---------------------------------------------------------------------------
# persistence

_CHECKPOINT_FORMAT = "mdm-checkpoint"
_CHECKPOINT_VERSION = 1
_GROUPS = ("param", "opt_m", "opt_v", "ema")


def save_checkpoint(state: TrainState, path) -> None:
    """One JSON header line, then the tensor container: parameters, Adam
    moments, EMA shadow.  Keys are written sorted so files are reproducible."""
    header = {
        "format": _CHECKPOINT_FORMAT,
        "version": _CHECKPOINT_VERSION,
        "config": asdict(state.cfg),
        "step": state.step,
        "rng": state.rng.get_state(),
    }
    tensors = {}
    groups = {"param": state.params, "opt_m": state.opt_m, "opt_v": state.opt_v,
              "ema": state.ema}
    for group in _GROUPS:
        for k in sorted(groups[group]):
            tensors[f"{group}/{k}"] = groups[group][k]
    blob = json.dumps(header, sort_keys=True).encode("utf-8") + b"\n"
    blob += serialize_tensors(tensors)
    with open(path, "wb") as fh:
        fh.write(blob)


def load_checkpoint(path) -> TrainState:
    with open(path, "rb") as fh:
        data = fh.read()
    nl = data.find(b"\n")
    if nl < 0:
        raise ContainerFormatError("checkpoint: missing header line")
    try:
        header = json.loads(data[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ContainerFormatError(f"checkpoint: bad header: {e}") from e
    if header.get("format") != _CHECKPOINT_FORMAT:
        raise ContainerFormatError(
            f"checkpoint: unexpected format {header.get('format')!r}")
    if header.get("version") != _CHECKPOINT_VERSION:
        raise ContainerFormatError(
            f"checkpoint: unsupported version {header.get('version')}")
    cfg = TrainConfig(**header["config"])
    tensors = parse_tensors(data[nl + 1:])
    groups: Dict[str, Dict[str, np.ndarray]] = {g: {} for g in _GROUPS}
    for name, arr in tensors.items():
        group, _, key = name.partition("/")
        if group not in groups or not key:
            raise ContainerFormatError(f"checkpoint: unexpected tensor '{name}'")
        groups[group][key] = arr
    want = set(init_params(cfg, RngState(0)))
    for g in _GROUPS:
        if set(groups[g]) != want:
            missing = sorted(want ^ set(groups[g]))[:4]
            raise ContainerFormatError(
                f"checkpoint: tensor set mismatch in group '{g}' near {missing}")
    rng = RngState(0)
    rng.set_state(header["rng"])
    return TrainState(
        cfg=cfg,
        params=groups["param"],
        opt_m=groups["opt_m"],
        opt_v=groups["opt_v"],
        ema=groups["ema"],
        step=int(header["step"]),
        rng=rng,
        sched=build_schedule(T=cfg.T, beta_start=cfg.beta_start, beta_end=cfg.beta_end),
    )
