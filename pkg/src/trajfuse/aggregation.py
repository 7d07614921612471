"""Per-trajectory feature aggregation over the memory-bank window.

Three stages run on every trajectory independently:

* global inter-object aggregation: candidate proposals crop the global and
  radar feature maps, a position embedding of their BEV indexes is added and
  a learnable matrix mixes the channels before the candidates are summed;
* local inter-grid aggregation: a 2K x 2K patch of the high-resolution local
  map around the reference match is read by a deformable attention whose
  sampling offsets and weights are predicted from the global query feature;
* trajectory reasoning: self-attention over the frames of one trajectory
  with a time encoding, a residual connection and a masked temporal mean.

The batched functions (``goa_batch``, ``lga_batch``, ``mstr``) are what the
model uses; ``goa_frame``/``lga_frame`` are single-slot conveniences built on
the same code.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import BevIndex
from .numerics import (
    ParamBundle,
    bilinear_sample_batch,
    bilinear_sample_batch_backward,
    init_mha,
    multi_head_attention,
    multi_head_attention_backward,
    softmax,
    softmax_backward,
    xavier_uniform,
)

MAX_CANDIDATES = 5


@dataclass
class AggregationConfig:
    C_g: int = 32
    C_l: int = 32
    lga_heads: int = 4
    lga_points: int = 4
    expansion: int = 2
    mstr_heads: int = 4
    use_pe: bool = True
    use_radar: bool = True
    use_time_encoding: bool = True

    def __post_init__(self):
        if self.C_g % 4:
            raise ValueError("C_g must be divisible by 4 for the position embedding")
        if self.C_l % self.lga_heads:
            raise ValueError("C_l must be divisible by lga_heads")
        if self.C_g % self.mstr_heads:
            raise ValueError("C_g must be divisible by mstr_heads")


def init_aggregation_params(params: ParamBundle, cfg: AggregationConfig, rng: np.random.Generator):
    Cg, Cl, H, J = cfg.C_g, cfg.C_l, cfg.lga_heads, cfg.lga_points
    D = Cl // H
    params.add("goa.W_a", xavier_uniform(rng, Cg, Cg))
    # offsets start at the reference point
    params.add("lga.W_off", np.zeros((Cg, H * J * 2)))
    params.add("lga.b_off", np.zeros(H * J * 2))
    params.add("lga.W_att", xavier_uniform(rng, Cg, H * J))
    params.add("lga.b_att", np.zeros(H * J))
    params.add("lga.W_val", np.stack([xavier_uniform(rng, Cl, D) for _ in range(H)]))
    params.add("lga.W_out", np.stack([xavier_uniform(rng, D, Cl) for _ in range(H)]))
    params.add("lga.W_proj", xavier_uniform(rng, Cl, Cg))
    params.add("lga.b_proj", np.zeros(Cg))
    init_mha(params, "mstr_g", Cg, rng)
    init_mha(params, "mstr_l", Cg, rng)


# --------------------------------------------------------------------------
# encodings


def _bands(n: int) -> np.ndarray:
    return 1.0 / (10000.0 ** (np.arange(n) / n))


def position_embedding(fx, fy, C: int) -> np.ndarray:
    """Sinusoidal embedding of continuous BEV coordinates, C/4 bands per axis."""
    fx = np.asarray(fx, dtype=np.float64)[..., None]
    fy = np.asarray(fy, dtype=np.float64)[..., None]
    w = _bands(C // 4)
    return np.concatenate([np.sin(fx * w), np.cos(fx * w), np.sin(fy * w), np.cos(fy * w)], axis=-1)


def time_encoding(offsets, C: int) -> np.ndarray:
    """Sinusoidal encoding of frame offsets (0 = current frame), shifted to vanish at offset 0."""
    t = np.asarray(offsets, dtype=np.float64)[..., None]
    w = _bands(C // 2)
    return np.concatenate([np.sin(t * w), np.cos(t * w) - 1.0], axis=-1)


# --------------------------------------------------------------------------
# global-level aggregation


@dataclass
class CandidateBatch:
    """Padded candidate lists for S slots.

    ``frame`` (S,) indexes the window maps; the (S, m) arrays hold integer and
    continuous BEV coordinates with ``valid`` marking real entries.
    """

    frame: np.ndarray
    ix: np.ndarray
    iy: np.ndarray
    fx: np.ndarray
    fy: np.ndarray
    valid: np.ndarray
    dropped: int = 0

    @classmethod
    def from_lists(cls, frames, cand_lists, grid_shape, m: int = MAX_CANDIDATES):
        H, W = grid_shape
        S = len(cand_lists)
        ix = np.zeros((S, m), dtype=np.int64)
        iy = np.zeros((S, m), dtype=np.int64)
        fx = np.zeros((S, m))
        fy = np.zeros((S, m))
        valid = np.zeros((S, m), dtype=bool)
        dropped = 0
        for s, cands in enumerate(cand_lists):
            ok = [c for c in cands if c.in_range and 0 <= c.ix < W and 0 <= c.iy < H]
            dropped += len(cands) - len(ok)
            # canonical order: the candidate sum is then independent of list order
            ok = sorted(ok, key=lambda c: (c.iy, c.ix, c.fy, c.fx))[:m]
            for j, c in enumerate(ok):
                ix[s, j], iy[s, j], fx[s, j], fy[s, j] = c.ix, c.iy, c.fx, c.fy
                valid[s, j] = True
        return cls(np.asarray(frames, dtype=np.int64).reshape(S), ix, iy, fx, fy, valid, dropped)


def goa_batch(F_global, F_radar, cb: CandidateBatch, W_a, use_pe: bool = True):
    """Global aggregation for every slot.

    ``F_global``/``F_radar`` are sequences of (C, H, W) maps over the window
    (``F_radar`` None disables radar guidance).  Returns ``(out (S, C), slot_valid (S,), cache)``.
    """
    fr = np.broadcast_to(cb.frame[:, None], cb.ix.shape)
    feats = gather_cells(F_global, fr, cb.iy, cb.ix)  # (S, m, C)
    if F_radar is not None:
        feats = feats + gather_cells(F_radar, fr, cb.iy, cb.ix)
    if use_pe:
        feats = feats + position_embedding(cb.fx, cb.fy, feats.shape[-1])
    feats = feats * cb.valid[..., None]
    u = feats.sum(axis=1)
    out = u @ W_a
    slot_valid = cb.valid.any(axis=1)
    return out, slot_valid, dict(u=u, cb=cb)


def goa_backward(dout, cache, W_a, n_frames: int, C: int, grid_shape):
    """Returns ``(dW_a, dF_radar)`` with ``dF_radar`` shaped (n, C, H, W)."""
    u, cb = cache["u"], cache["cb"]
    dW = u.T @ dout
    du = dout @ W_a.T  # (S, C)
    H, W = grid_shape
    dR = np.zeros((n_frames, C, H * W))
    s_idx, j_idx = np.nonzero(cb.valid)
    if len(s_idx):
        lin = cb.frame[s_idx] * (H * W) + cb.iy[s_idx, j_idx] * W + cb.ix[s_idx, j_idx]
        flat = dR.transpose(1, 0, 2).reshape(C, -1)
        for c in range(C):
            flat[c] += np.bincount(lin, weights=du[s_idx, c], minlength=n_frames * H * W)
        dR = flat.reshape(C, n_frames, H * W).transpose(1, 0, 2)
    return dW, dR.reshape(n_frames, C, H, W)


def goa_frame(F_global, F_radar, cands: list[BevIndex], W_a, use_pe: bool = True):
    """Aggregate one frame's candidates into a (C,) vector.

    Returns ``(vector, valid)``; with no usable candidate the vector is zero
    and ``valid`` is False.
    """
    cb = CandidateBatch.from_lists([0], [cands], F_global.shape[1:])
    Fr = None if F_radar is None else np.asarray(F_radar)[None]
    out, ok, _ = goa_batch(np.asarray(F_global)[None], Fr, cb, W_a, use_pe)
    return out[0], bool(ok[0])


# --------------------------------------------------------------------------
# local-level aggregation


LGA_KEYS = ("W_off", "b_off", "W_att", "b_att", "W_val", "W_out", "W_proj", "b_proj")


def crop_local_patches(F_local, frames, ix, iy, K: int):
    """Crop 2K x 2K local patches centred on global cells (ix, iy).

    ``F_local`` is a sequence of (C_l, 2H, 2W) maps (or a stacked array)
    indexed by ``frames``.  Global cell ``i`` covers local cells ``2i`` and
    ``2i + 1``, so the patch spans local cells ``2i + 1 - K`` to ``2i + K``.
    Cells beyond the map are zero.  Returns (S, C_l, 2K, 2K).
    """
    frames = np.asarray(frames, dtype=np.int64)
    C, H2, W2 = F_local[int(frames[0])].shape if len(frames) else (0, 0, 0)
    r = np.arange(2 * K)
    rows = (2 * np.asarray(iy) + 1 - K)[:, None] + r[None, :]
    cols = (2 * np.asarray(ix) + 1 - K)[:, None] + r[None, :]
    ok = ((rows >= 0) & (rows < H2))[:, :, None] & ((cols >= 0) & (cols < W2))[:, None, :]
    rc = np.clip(rows, 0, H2 - 1)[:, :, None]
    cc = np.clip(cols, 0, W2 - 1)[:, None, :]
    out = np.zeros((len(frames), C, 2 * K, 2 * K))
    for f in np.unique(frames):
        sel = np.flatnonzero(frames == f)
        vals = F_local[int(f)][:, rc[sel], cc[sel]]  # (C, s, 2K, 2K)
        out[sel] = np.moveaxis(vals, 0, 1) * ok[sel][:, None]
    return out


def gather_cells(maps, frames, iy, ix):
    """Feature vectors at integer cells: ``maps[frames[s]][:, iy[s], ix[s]]`` -> (S, ..., C)."""
    frames = np.asarray(frames, dtype=np.int64)
    iy = np.asarray(iy)
    ix = np.asarray(ix)
    C = maps[0].shape[0] if len(maps) else 0
    out = np.zeros(iy.shape + (C,))
    for f in np.unique(frames):
        sel = frames == f
        out[sel] = np.moveaxis(maps[int(f)][:, iy[sel], ix[sel]], 0, -1)
    return out


def lga_batch(F_global, F_local, frames, ix, iy, p: dict, cfg: AggregationConfig):
    """Cross-level deformable attention for S reference slots.

    Returns ``(out (S, C_g), cache)``.
    """
    H, J, K = cfg.lga_heads, cfg.lga_points, cfg.expansion
    frames = np.asarray(frames, dtype=np.int64)
    ix = np.asarray(ix, dtype=np.int64)
    iy = np.asarray(iy, dtype=np.int64)
    S = len(frames)
    q = gather_cells(F_global, frames, iy, ix)  # (S, C_g)
    patches = crop_local_patches(F_local, frames, ix, iy, K)
    off = (q @ p["W_off"] + p["b_off"]).reshape(S, H, J, 2)
    logits = (q @ p["W_att"] + p["b_att"]).reshape(S, H, J)
    A = softmax(logits, axis=-1)
    center = K - 0.5
    px = center + off[..., 0]
    py = center + off[..., 1]
    samp = bilinear_sample_batch(patches, px, py)  # (S, H, J, C_l)
    v = np.einsum("shjc,hcd->shjd", samp, p["W_val"])
    agg = np.einsum("shj,shjd->shd", A, v)
    mixed = np.einsum("shd,hdc->sc", agg, p["W_out"])
    out = mixed @ p["W_proj"] + p["b_proj"]
    cache = dict(q=q, patches=patches, A=A, px=px, py=py, samp=samp, v=v, agg=agg, mixed=mixed)
    return out, cache


def lga_backward(dout, cache, p: dict, cfg: AggregationConfig) -> dict:
    H, J = cfg.lga_heads, cfg.lga_points
    q, A, samp, v, agg, mixed = (cache[k] for k in ("q", "A", "samp", "v", "agg", "mixed"))
    S = q.shape[0]
    g = {}
    g["W_proj"] = mixed.T @ dout
    g["b_proj"] = dout.sum(axis=0)
    dmixed = dout @ p["W_proj"].T
    g["W_out"] = np.einsum("shd,sc->hdc", agg, dmixed)
    dagg = np.einsum("sc,hdc->shd", dmixed, p["W_out"])
    dA = np.einsum("shd,shjd->shj", dagg, v)
    dv = A[..., None] * dagg[:, :, None, :]
    g["W_val"] = np.einsum("shjc,shjd->hcd", samp, dv)
    dsamp = np.einsum("shjd,hcd->shjc", dv, p["W_val"])
    dpx, dpy = bilinear_sample_batch_backward(dsamp, cache["patches"], cache["px"], cache["py"])
    doff = np.stack([dpx, dpy], axis=-1).reshape(S, H * J * 2)
    dlog = softmax_backward(dA, A, axis=-1).reshape(S, H * J)
    g["W_off"] = q.T @ doff
    g["b_off"] = doff.sum(axis=0)
    g["W_att"] = q.T @ dlog
    g["b_att"] = dlog.sum(axis=0)
    return g


def lga_frame(F_local, F_global, ref: BevIndex, p: dict, cfg: AggregationConfig):
    """Local aggregation around one reference match; returns a (C_g,) vector."""
    out, _ = lga_batch(np.asarray(F_global)[None], np.asarray(F_local)[None], [0], [ref.ix], [ref.iy], p, cfg)
    return out[0]


# --------------------------------------------------------------------------
# trajectory-level reasoning


def mstr(F_seq, mask, p: dict, heads: int, use_time_encoding: bool = True):
    """Temporal self-attention per trajectory.

    ``F_seq`` is (R, C, n) with frames ordered oldest to newest, ``mask`` (R, n)
    marks valid slots.  Returns ``(out (R, C), valid (R,), cache)``; a fully
    masked trajectory yields a zero vector with ``valid`` False.
    """
    F_seq = np.asarray(F_seq, dtype=np.float64)
    R, C, n = F_seq.shape
    if n < 1:
        raise ValueError("window length must be >= 1")
    mask = np.asarray(mask, dtype=bool).reshape(R, n)
    m = mask[..., None].astype(np.float64)
    x = np.transpose(F_seq, (0, 2, 1))
    if use_time_encoding:
        x = x + time_encoding(np.arange(n - 1, -1, -1), C)[None]
    x = x * m
    attn, mcache = multi_head_attention(x, p, heads, mask)
    y = x + attn
    cnt = m.sum(axis=1)
    out = (y * m).sum(axis=1) / np.maximum(cnt, 1.0)
    return out, cnt[:, 0] > 0, dict(mcache=mcache, m=m, cnt=cnt)


def mstr_backward(dout, cache):
    """Returns ``(dF_seq (R, C, n), grads)``."""
    m, cnt = cache["m"], cache["cnt"]
    dy = m * (dout / np.maximum(cnt, 1.0))[:, None, :]
    dx, g = multi_head_attention_backward(dy, cache["mcache"])
    dx = (dx + dy) * m
    return np.transpose(dx, (0, 2, 1)), g


@dataclass
class AggregatedFeature:
    """Per-trajectory aggregation results for one current frame."""

    per_frame_global: np.ndarray  # (R, n, C_g), zeros on masked slots
    per_frame_local: np.ndarray  # (R, n, C_g)
    fused_global: np.ndarray  # (R, C_g)
    fused_local: np.ndarray  # (R, C_g)
    mask_global: np.ndarray  # (R, n)
    mask_local: np.ndarray  # (R, n)
