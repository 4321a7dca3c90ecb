"""Explainability outputs: attention stacks, input-gradient saliency,
importance heatmaps, and reproducible grayscale/overlay renders.

All captures are read-only: they never perturb parameters or later
predictions. Renders go through the PGM/PPM writers, so output bytes
are deterministic for a given model and image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .models import Model
from .pgmio import write_pgm, write_ppm
from .tensor import Tensor, record


@dataclass
class AttentionStack:
    """Row-stochastic attention matrices, (num_blocks, num_heads, N, N)."""

    values: np.ndarray
    variant: str


@dataclass
class SaliencyMap:
    """Non-negative per-pixel influence, max-normalized unless all-zero."""

    values: np.ndarray


def extract_attention_maps(model: Model, image: np.ndarray) -> AttentionStack:
    """Capture every block/head attention matrix from one eval forward.

    For windowed variants each row carries the window's weights at the
    global patch indices and zeros elsewhere, so rows still sum to 1.
    """
    if model.config.variant == "cnn":
        raise ContractError("cnn variant exposes no attention maps")
    capture: list[dict] = []
    model.forward(np.asarray(image)[None], capture=capture)
    capture.sort(key=lambda entry: entry["block"])
    stacked = np.stack([entry["attn"][0] for entry in capture])
    return AttentionStack(values=stacked, variant=model.config.variant)


def saliency_map(model: Model, image: np.ndarray, *,
                 normalized: bool = True) -> SaliencyMap:
    """|d(prediction degC) / d(pixel)|, summed over channels.

    With ``normalized`` the map is scaled to max 1 (all-zero maps stay
    zero); otherwise raw gradient magnitudes are returned.
    """
    x = Tensor(np.asarray(image, dtype=np.float64)[None], requires_grad=True)
    with record() as tape:
        out = model.forward_celsius(x)
        loss = out.sum()
    tape.backward(loss)
    grad = np.abs(x.grad[0]).sum(axis=-1)
    if normalized:
        peak = grad.max()
        if peak > 0.0:
            grad = grad / peak
    return SaliencyMap(values=grad)


def importance_heatmap(model: Model) -> np.ndarray:
    """Learned per-patch importance reshaped to the patch grid."""
    w = model.importance_weights()
    return w.reshape(model.grid)


# 256-entry black -> red -> yellow ramp; blue stays 0 throughout.
_RAMP = np.zeros((256, 3), dtype=np.uint8)
_RAMP[:128, 0] = np.rint(np.arange(128) * 255.0 / 127.0).astype(np.uint8)
_RAMP[128:, 0] = 255
_RAMP[128:, 1] = np.rint((np.arange(128, 256) - 128) * 255.0 / 127.0).astype(np.uint8)


def color_ramp() -> np.ndarray:
    """The fixed overlay ramp as a (256, 3) uint8 table."""
    return _RAMP.copy()


def render_grayscale(values: np.ndarray, path: str) -> None:
    """Quantize a [0, 1] map to 8 bits and write it as PGM."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.min() < -1e-12 or arr.max() > 1.0 + 1e-12:
        raise ContractError(f"map must lie in [0, 1], got "
                            f"[{arr.min():g}, {arr.max():g}]")
    write_pgm(path, arr)


def render_overlay(image: np.ndarray, values: np.ndarray, path: str) -> None:
    """Blend the grayscale base with the color ramp, weight = saliency.

    A zero map reproduces the base image replicated to RGB exactly.
    """
    base = np.asarray(image, dtype=np.float64)
    if base.ndim == 3:
        base = base.mean(axis=-1)
    sal = np.asarray(values, dtype=np.float64)
    if sal.shape != base.shape:
        raise ContractError(f"map shape {sal.shape} != image shape {base.shape}")
    sal = np.clip(sal, 0.0, 1.0)
    gray = np.clip(base, 0.0, 1.0) * 255.0
    ramp = _RAMP[np.rint(sal * 255.0).astype(np.intp)].astype(np.float64)
    blended = (1.0 - sal[..., None]) * gray[..., None] + sal[..., None] * ramp
    write_ppm(path, np.rint(blended).astype(np.uint8))


def explain_to_directory(model: Model, image: np.ndarray, out_dir: str) -> list[str]:
    """Write the full explanation set for one image; returns filenames.

    Attention maps (skipped for the CNN) land as ``attn_b{i}_h{j}.pgm``
    with each matrix max-normalized for display; saliency and its
    overlay are always produced; importance-weight models also get
    ``importance.pgm`` (min-max scaled).
    """
    import os

    os.makedirs(out_dir, exist_ok=True)
    written: list[str] = []
    if model.config.variant != "cnn":
        stack = extract_attention_maps(model, image)
        blocks, heads = stack.values.shape[:2]
        for b in range(blocks):
            for h in range(heads):
                attn = stack.values[b, h]
                peak = attn.max()
                if peak > 0.0:
                    attn = attn / peak
                name = f"attn_b{b + 1}_h{h + 1}.pgm"
                render_grayscale(attn, os.path.join(out_dir, name))
                written.append(name)
    sal = saliency_map(model, image)
    render_grayscale(sal.values, os.path.join(out_dir, "saliency.pgm"))
    written.append("saliency.pgm")
    render_overlay(image, sal.values, os.path.join(out_dir, "overlay.ppm"))
    written.append("overlay.ppm")
    if model.config.variant == "importance_vit":
        heat = importance_heatmap(model)
        lo, hi = heat.min(), heat.max()
        scaled = (heat - lo) / (hi - lo) if hi > lo else np.zeros_like(heat)
        render_grayscale(scaled, os.path.join(out_dir, "importance.pgm"))
        written.append("importance.pgm")
    return written
