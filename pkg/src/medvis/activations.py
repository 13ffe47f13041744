"""Activation-map export at fixed tap points of a segmentation model.

Token taps are reduced to per-token L2 norms and laid out on the patch grid.
The attention tap is the last attention layer before the head, averaged over
heads, as a T×T matrix.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data.volume import save_raw
from .model import SegmentationModel
from .numerics import no_grad
from .runtime import write_json
from .vit import patchify

log = logging.getLogger(__name__)

TAPS = ("encoder_out", "mapper1_out", "mapper2_out", "decoder_in", "attention", "output")
_INSERT_TAPS = {"mapper1_out", "mapper2_out"}


@dataclass
class ActivationBundle:
    grid: tuple[int, int, int]
    maps: dict[str, np.ndarray] = field(default_factory=dict)
    attention: np.ndarray | None = None
    skipped: list[dict] = field(default_factory=list)

    @property
    def taps(self) -> list[str]:
        return [*self.maps, *(["attention"] if self.attention is not None else [])]


def _final_attention(model: SegmentationModel):
    blocks = model.decoder.blocks or model.encoder.blocks
    return blocks[-1].attn if blocks else None


def collect_activations(model: SegmentationModel, volume, taps=TAPS) -> ActivationBundle:
    unknown = set(taps) - set(TAPS)
    if unknown:
        raise ValueError(f"unknown taps {sorted(unknown)}; expected a subset of {TAPS}")
    cfg = model.spec.vit
    bundle = ActivationBundle(cfg.grid)
    has_insert = model.spec.bridge.startswith("llama")
    attn = _final_attention(model)

    model.taps = {}
    if has_insert:
        model.bridge.taps = model.taps
    if attn is not None:
        attn.record = True
    try:
        with no_grad():
            logits = model(np.asarray(volume, dtype=np.float32)[None]).data
    finally:
        captured, model.taps = model.taps, None
        if has_insert:
            model.bridge.taps = None
        if attn is not None:
            attn.record = False
    captured["output"] = patchify(logits, cfg.patch_size).tokens

    for tap in taps:
        if tap == "attention":
            if attn is None:
                bundle.skipped.append({"tap": tap, "reason": "model has no attention layers"})
            else:
                bundle.attention = attn.last_attention[0].astype(np.float64).mean(axis=0)
        elif tap in _INSERT_TAPS and not has_insert:
            bundle.skipped.append({"tap": tap, "reason": f"not defined for bridge {model.spec.bridge!r}"})
        else:
            tokens = captured[tap][0].astype(np.float64)
            bundle.maps[tap] = np.linalg.norm(tokens, axis=-1).reshape(cfg.grid)
    for rec in bundle.skipped:
        log.warning("skipping tap %s: %s", rec["tap"], rec["reason"])
    return bundle


def export_activation_maps(model: SegmentationModel, volume, out_dir: str | os.PathLike,
                           taps=TAPS) -> ActivationBundle:
    """Write one raw+json grid per token tap, the attention matrix and an index file."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bundle = collect_activations(model, volume, taps)
    files = {}
    for name, grid in bundle.maps.items():
        files[name] = save_raw(out / name, grid).name
    if bundle.attention is not None:
        files["attention"] = save_raw(out / "attention", bundle.attention).name
    write_json(out / "activations.json", {
        "schema": "activations/1",
        "grid": list(bundle.grid),
        "tokens": int(np.prod(bundle.grid)),
        "reduction": "per-token L2 norm; attention averaged over heads",
        "files": files,
        "skipped": bundle.skipped,
    })
    return bundle
