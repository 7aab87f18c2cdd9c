"""Latent codec: turns images and token strings into latent sequences and back.

Content vectors are produced by a small variational encoder.  On top of the
usual reparameterized sample s = mu + sigma * eta, an extra unit-variance
noise term is added (z = s + eps), so the encoder output has variance
sigma^2 + 1 per dimension; `extra_noise=False` switches that term off.

A latent sequence is laid out as

    [pad, time, class?, content_0 ... content_{n-1}, pad]

where the specials are learned vectors (the time slot additionally carries a
fixed sinusoid of the diffusion step so distinct steps are always
distinguishable).  Specials are never diffused and never updated by the
sampler; they exist to condition the scan blocks.

Forward functions return (output, cache) pairs where the pipeline needs
gradients; each has a matching *_back that consumes the cache and the
upstream gradient.  The backward passes are hand-derived and checked against
central finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Tuple

import numpy as np

from .numerics import ArgumentError, RngState, softmax

ROLE_CONTENT = 0
ROLE_PAD = 1
ROLE_TIME = 2
ROLE_CLASS = 3

ROLE_NAMES = {ROLE_CONTENT: "content", ROLE_PAD: "pad", ROLE_TIME: "time", ROLE_CLASS: "class"}


@dataclass
class CodecConfig:
    image_hw: int = 8
    channels: int = 1
    patch: int = 2
    latent_dim: int = 64
    vocab: int = 256
    num_classes: int = 2
    max_text: int = 32

    @property
    def grid(self) -> Tuple[int, int]:
        g = self.image_hw // self.patch
        return (g, g)

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    @property
    def n_image_content(self) -> int:
        g = self.grid
        return g[0] * g[1]


@dataclass
class LatentSequence:
    """Batchable latent sequence.  vectors is [..., length, dim]; roles is a
    shared [length] vector of ROLE_* codes; t is the diffusion step the
    content currently sits at (0 = clean)."""

    vectors: np.ndarray
    roles: np.ndarray
    modality: str
    t: float = 0.0
    grid: Optional[Tuple[int, int]] = None

    def __post_init__(self):
        if self.vectors.shape[-2] != self.roles.shape[0]:
            raise ArgumentError(
                f"LatentSequence: vectors length {self.vectors.shape[-2]} "
                f"!= roles length {self.roles.shape[0]}")

    @property
    def length(self) -> int:
        return int(self.roles.shape[0])

    @property
    def content_mask(self) -> np.ndarray:
        return self.roles == ROLE_CONTENT

    @property
    def content(self) -> np.ndarray:
        return self.vectors[..., self.content_mask, :]

    def with_vectors(self, vectors: np.ndarray, t: Optional[float] = None) -> "LatentSequence":
        return replace(self, vectors=vectors, t=self.t if t is None else t)

    def with_content(self, content: np.ndarray, t: Optional[float] = None) -> "LatentSequence":
        vectors = self.vectors.copy()
        vectors[..., self.content_mask, :] = content
        return self.with_vectors(vectors, t=t)


# ---------------------------------------------------------------------------
# patch <-> image

def patchify(image: np.ndarray, patch: int) -> np.ndarray:
    """[..., H, W, C] -> [..., (H/p)*(W/p), p*p*C], row-major over the grid."""
    image = np.asarray(image)
    *lead, h, w, c = image.shape
    if h % patch or w % patch:
        raise ArgumentError(f"patchify: image {h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    x = image.reshape(*lead, gh, patch, gw, patch, c)
    x = np.moveaxis(x, -4, -3)  # [..., gh, gw, patch, patch, c]
    return x.reshape(*lead, gh * gw, patch * patch * c)


def unpatchify(patches: np.ndarray, grid: Tuple[int, int], patch: int, channels: int) -> np.ndarray:
    patches = np.asarray(patches)
    gh, gw = grid
    *lead, n, pd = patches.shape
    if n != gh * gw or pd != patch * patch * channels:
        raise ArgumentError(
            f"unpatchify: got {n} patches of dim {pd}, expected {gh * gw} of "
            f"dim {patch * patch * channels}")
    x = patches.reshape(*lead, gh, gw, patch, patch, channels)
    x = np.moveaxis(x, -3, -4)  # [..., gh, patch, gw, patch, c]
    return x.reshape(*lead, gh * patch, gw * patch, channels)


# ---------------------------------------------------------------------------
# parameters

def init_codec_params(cfg: CodecConfig, rng: RngState, dtype=np.float32) -> Dict[str, np.ndarray]:
    d = cfg.latent_dim
    pd = cfg.patch_dim

    def w(shape, scale):
        return (rng.normal(shape) * scale).astype(dtype)

    params = {
        "embed/tokens": w((cfg.vocab, d), 1.0),
        "patch/w": w((pd, d), 1.0 / np.sqrt(pd)),
        "patch/b": np.zeros(d, dtype=dtype),
        "enc/mu_w": w((d, d), 0.1 / np.sqrt(d)),
        "enc/mu_b": np.zeros(d, dtype=dtype),
        "enc/sig_w": w((d, d), 0.1 / np.sqrt(d)),
        "enc/sig_b": np.zeros(d, dtype=dtype),
        "special/pad_start": w((d,), 0.5),
        "special/pad_end": w((d,), 0.5),
        "special/time_base": w((d,), 0.5),
        # one row per class plus a trailing null row used when the class
        # token is dropped for guidance training
        "special/class": w((cfg.num_classes + 1, d), 0.5),
        "dec/img_w": np.zeros((d, pd), dtype=dtype),
        "dec/img_b": np.zeros(pd, dtype=dtype),
        "dec/txt_w": np.zeros((d, cfg.vocab), dtype=dtype),
        "dec/txt_b": np.zeros(cfg.vocab, dtype=dtype),
    }
    return params


# ---------------------------------------------------------------------------
# content embeddings

def embed_image(params: Dict, images: np.ndarray, patch: int):
    """[..., H, W, C] -> ([..., n, d], cache)"""
    patches = patchify(images, patch)
    out = patches @ params["patch/w"] + params["patch/b"]
    return out, {"patches": patches}


def embed_image_back(params: Dict, cache: Dict, d_out: np.ndarray) -> Dict[str, np.ndarray]:
    patches = cache["patches"]
    flat_p = patches.reshape(-1, patches.shape[-1])
    flat_d = d_out.reshape(-1, d_out.shape[-1])
    return {"patch/w": flat_p.T @ flat_d, "patch/b": flat_d.sum(axis=0)}


def embed_text(params: Dict, ids: np.ndarray):
    ids = np.asarray(ids)
    table = params["embed/tokens"]
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ArgumentError(
            f"embed_text: token id out of range [0, {table.shape[0]}): "
            f"min {ids.min()}, max {ids.max()}")
    return table[ids], {"ids": ids}


def embed_text_back(params: Dict, cache: Dict, d_out: np.ndarray) -> Dict[str, np.ndarray]:
    table = params["embed/tokens"]
    grad = np.zeros_like(table)
    flat_ids = cache["ids"].reshape(-1)
    flat_d = d_out.reshape(-1, d_out.shape[-1])
    np.add.at(grad, flat_ids, flat_d)
    return {"embed/tokens": grad}


# ---------------------------------------------------------------------------
# variational encoder

def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def encode_latent(params: Dict, emb: np.ndarray, rng: Optional[RngState] = None, *,
                  modality: str, grid: Optional[Tuple[int, int]] = None,
                  extra_noise: bool = True, noises=None):
    """Variational encode of content embeddings.

    Returns (LatentSequence of clean content latents, mu, sigma, cache).
    `noises` may supply (eta, eps) explicitly for deterministic replay; eps is
    ignored when extra_noise is off.
    """
    mu = emb @ params["enc/mu_w"] + params["enc/mu_b"]
    sig_pre = emb @ params["enc/sig_w"] + params["enc/sig_b"]
    sigma = softplus(sig_pre).astype(emb.dtype, copy=False)
    if noises is not None:
        eta, eps = noises
    else:
        if rng is None:
            raise ArgumentError("encode_latent: need an rng when noises are not supplied")
        eta = rng.normal(mu.shape, dtype=mu.dtype)
        eps = rng.normal(mu.shape, dtype=mu.dtype)
    z0 = mu + sigma * eta
    if extra_noise:
        z0 = z0 + eps
    roles = np.full(emb.shape[-2], ROLE_CONTENT, dtype=np.int8)
    seq = LatentSequence(vectors=z0, roles=roles, modality=modality, t=0.0, grid=grid)
    cache = {"emb": emb, "sig_pre": sig_pre, "sigma": sigma, "eta": eta,
             "extra_noise": extra_noise}
    return seq, mu, sigma, cache


def encode_latent_back(params: Dict, cache: Dict, d_z0: np.ndarray,
                       d_mu_ext: Optional[np.ndarray] = None,
                       d_sigma_ext: Optional[np.ndarray] = None):
    """Backward of encode_latent.

    d_z0 arrives through the latent; d_mu_ext/d_sigma_ext arrive directly
    (the KL term differentiates mu and sigma without passing through z0).
    Returns (d_emb, param grads).
    """
    emb, eta = cache["emb"], cache["eta"]
    d_mu = np.array(d_z0, copy=True)
    d_sigma = d_z0 * eta
    if d_mu_ext is not None:
        d_mu += d_mu_ext
    if d_sigma_ext is not None:
        d_sigma = d_sigma + d_sigma_ext
    # sigma = softplus(pre) => d pre = d sigma * sigmoid(pre)
    d_pre = d_sigma * _sigmoid(cache["sig_pre"])
    flat_e = emb.reshape(-1, emb.shape[-1])
    grads = {
        "enc/mu_w": flat_e.T @ d_mu.reshape(-1, d_mu.shape[-1]),
        "enc/mu_b": d_mu.reshape(-1, d_mu.shape[-1]).sum(axis=0),
        "enc/sig_w": flat_e.T @ d_pre.reshape(-1, d_pre.shape[-1]),
        "enc/sig_b": d_pre.reshape(-1, d_pre.shape[-1]).sum(axis=0),
    }
    d_emb = d_mu @ params["enc/mu_w"].T + d_pre @ params["enc/sig_w"].T
    return d_emb, grads


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# special tokens

def time_vector(params: Dict, t: float) -> np.ndarray:
    """Learned base + fixed sinusoid of the diffusion step.  The sinusoid
    guarantees distinct steps map to distinct vectors regardless of what the
    base learns."""
    base = params["special/time_base"]
    d = base.shape[0]
    half = d // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = t * freqs
    sin_cos = np.concatenate([np.sin(ang), np.cos(ang)]).astype(base.dtype)
    if sin_cos.shape[0] < d:
        sin_cos = np.concatenate([sin_cos, np.zeros(d - sin_cos.shape[0], dtype=base.dtype)])
    return base + sin_cos


def insert_padding_tokens(params: Dict, seq: LatentSequence, t: float,
                          class_id: Optional[int] = None, *,
                          null_class: bool = False) -> LatentSequence:
    """Wrap a content-only sequence as [pad, time, class?, content..., pad].

    class_id=None omits the class slot entirely; null_class=True keeps the
    slot but fills it with the learned null row (guidance token drop).
    """
    if np.any(seq.roles != ROLE_CONTENT):
        raise ArgumentError("insert_padding_tokens: sequence already has special roles")
    table = params["special/class"]
    specials = [params["special/pad_start"], time_vector(params, t)]
    roles = [ROLE_PAD, ROLE_TIME]
    if null_class:
        specials.append(table[-1])
        roles.append(ROLE_CLASS)
    elif class_id is not None:
        if not (0 <= class_id < table.shape[0] - 1):
            raise ArgumentError(
                f"insert_padding_tokens: class_id {class_id} out of range "
                f"[0, {table.shape[0] - 1})")
        specials.append(table[class_id])
        roles.append(ROLE_CLASS)
    prefix = np.stack(specials).astype(seq.vectors.dtype)
    suffix = params["special/pad_end"][None, :].astype(seq.vectors.dtype)
    lead = seq.vectors.shape[:-2]
    prefix_b = np.broadcast_to(prefix, lead + prefix.shape)
    suffix_b = np.broadcast_to(suffix, lead + suffix.shape)
    vectors = np.concatenate([prefix_b, seq.vectors, suffix_b], axis=-2)
    roles_arr = np.concatenate([
        np.array(roles, dtype=np.int8),
        seq.roles,
        np.array([ROLE_PAD], dtype=np.int8),
    ])
    return LatentSequence(vectors=vectors, roles=roles_arr, modality=seq.modality,
                          t=t, grid=seq.grid)


def padding_token_grads(seq: LatentSequence, d_vectors: np.ndarray,
                        class_row: Optional[int]) -> Dict[str, np.ndarray]:
    """Scatter sequence-level gradients back onto the special-token tensors.
    The sinusoid part of the time slot is constant, so its gradient lands
    entirely on the learned base."""
    roles = seq.roles
    flat = d_vectors.reshape(-1, roles.shape[0], d_vectors.shape[-1])
    grads: Dict[str, np.ndarray] = {}
    pad_rows = np.where(roles == ROLE_PAD)[0]
    grads["special/pad_start"] = flat[:, pad_rows[0], :].sum(axis=0)
    grads["special/pad_end"] = flat[:, pad_rows[-1], :].sum(axis=0)
    time_row = np.where(roles == ROLE_TIME)[0][0]
    grads["special/time_base"] = flat[:, time_row, :].sum(axis=0)
    cls_rows = np.where(roles == ROLE_CLASS)[0]
    if cls_rows.size and class_row is not None:
        grads["special/class"] = (class_row, flat[:, cls_rows[0], :].sum(axis=0))
    return grads


# ---------------------------------------------------------------------------
# decoders

def decode_image(params: Dict, seq: LatentSequence, cfg: CodecConfig,
                 reference: Optional[np.ndarray] = None):
    """Content latents -> image.  With a reference, also returns the mean
    squared error over all pixels; cache supports the backward pass."""
    content = seq.content
    patches = content @ params["dec/img_w"] + params["dec/img_b"]
    grid = seq.grid if seq.grid is not None else cfg.grid
    image = unpatchify(patches, grid, cfg.patch, cfg.channels)
    loss = None
    diff = None
    if reference is not None:
        if reference.shape != image.shape:
            raise ArgumentError(
                f"decode_image: reference shape {reference.shape} != decoded "
                f"shape {image.shape}")
        diff = image - reference
        loss = float(np.mean(diff.astype(np.float64) ** 2))
    cache = {"content": content, "diff": diff, "grid": grid}
    return image, loss, cache


def decode_image_loss_back(params: Dict, cache: Dict, cfg: CodecConfig, d_loss: float = 1.0):
    """Returns (d_content, param grads) for the MSE loss."""
    diff = cache["diff"]
    d_image = (2.0 * d_loss / diff.size) * diff
    d_patches = patchify(d_image.astype(cache["content"].dtype), cfg.patch)
    content = cache["content"]
    flat_c = content.reshape(-1, content.shape[-1])
    flat_d = d_patches.reshape(-1, d_patches.shape[-1])
    grads = {"dec/img_w": flat_c.T @ flat_d, "dec/img_b": flat_d.sum(axis=0)}
    d_content = d_patches @ params["dec/img_w"].T
    return d_content, grads


def decode_text(params: Dict, seq: LatentSequence,
                reference_ids: Optional[np.ndarray] = None):
    """Content latents -> token ids (argmax).  With reference ids, also the
    mean cross-entropy per token."""
    content = seq.content
    logits = content @ params["dec/txt_w"] + params["dec/txt_b"]
    ids = np.argmax(logits, axis=-1)
    loss = None
    probs = None
    if reference_ids is not None:
        reference_ids = np.asarray(reference_ids)
        if reference_ids.shape != logits.shape[:-1]:
            raise ArgumentError(
                f"decode_text: reference shape {reference_ids.shape} != "
                f"logit positions {logits.shape[:-1]}")
        probs = softmax(logits.astype(np.float64), axis=-1)
        picked = np.take_along_axis(probs, reference_ids[..., None], axis=-1)
        loss = float(np.mean(-np.log(np.maximum(picked, 1e-300))))
    cache = {"content": content, "probs": probs, "reference_ids": reference_ids}
    return ids, loss, cache


def decode_text_loss_back(params: Dict, cache: Dict, d_loss: float = 1.0):
    probs, ref = cache["probs"], cache["reference_ids"]
    n = int(np.prod(ref.shape))
    d_logits = probs.copy()
    np.subtract.at(d_logits.reshape(-1, d_logits.shape[-1]),
                   (np.arange(n), ref.reshape(-1)), 1.0)
    d_logits *= d_loss / n
    d_logits = d_logits.astype(cache["content"].dtype)
    content = cache["content"]
    flat_c = content.reshape(-1, content.shape[-1])
    flat_d = d_logits.reshape(-1, d_logits.shape[-1])
    grads = {"dec/txt_w": flat_c.T @ flat_d, "dec/txt_b": flat_d.sum(axis=0)}
    d_content = d_logits @ params["dec/txt_w"].T
    return d_content, grads


# ---------------------------------------------------------------------------
# KL

def kl_loss(mu: np.ndarray, sigma: np.ndarray) -> float:
    """0.5 * sum_dim (mu^2 + sigma^2 - 1 - 2 log sigma), averaged over
    positions (and any leading batch axes)."""
    if mu.shape != sigma.shape:
        raise ArgumentError(f"kl_loss: mu shape {mu.shape} != sigma shape {sigma.shape}")
    mu64 = mu.astype(np.float64)
    sig64 = sigma.astype(np.float64)
    per_pos = 0.5 * np.sum(mu64**2 + sig64**2 - 1.0 - 2.0 * np.log(sig64), axis=-1)
    return float(np.mean(per_pos))


def kl_loss_back(mu: np.ndarray, sigma: np.ndarray, d_loss: float = 1.0):
    """d/dmu = mu / n_pos, d/dsigma = (sigma - 1/sigma) / n_pos."""
    n_pos = int(np.prod(mu.shape[:-1])) or 1
    scale = d_loss / n_pos
    return (scale * mu).astype(mu.dtype), (scale * (sigma - 1.0 / sigma)).astype(sigma.dtype)
