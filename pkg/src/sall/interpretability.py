"""Grad-CAM heatmaps over the convolutional trunk."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .autodiff import ContractError, Tape, Tensor
from .network import NetworkSpec, ParameterSet, bind, head_logits, run_trunk


@dataclass(frozen=True)
class Heatmap:
    values: np.ndarray  # resized to the input h x w, max-normalized
    native: np.ndarray  # same map at the layer's own resolution
    layer: str
    task_id: str
    class_index: int
    degenerate: bool = False

    def sidecar(self) -> dict:
        return {
            "layer": self.layer,
            "task_id": self.task_id,
            "class_index": self.class_index,
            "degenerate": self.degenerate,
            "native_shape": list(self.native.shape),
        }


def cam_from(features: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """ReLU of the gradient-weighted channel sum; ``features``/``grads`` are [C, h, w]."""
    weights = grads.mean(axis=(1, 2))
    return np.maximum(np.tensordot(weights, features, axes=1), 0.0)


def _resize(cam: np.ndarray, shape) -> np.ndarray:
    if cam.shape == tuple(shape):
        return cam.copy()
    zoom = (shape[0] / cam.shape[0], shape[1] / cam.shape[1])
    return np.maximum(ndimage.zoom(cam, zoom, order=1, mode="nearest", grid_mode=True), 0.0)


def grad_cam(params: ParameterSet, spec: NetworkSpec, image, task_id: str, class_index: Optional[int] = None,
             layer: Optional[str] = None) -> Heatmap:
    """Heatmap of evidence for ``class_index`` of head ``task_id`` (the predicted
    class when omitted) at conv layer ``layer`` (the last one by default)."""
    convs = spec.conv_layers()
    layer = layer or (convs[-1] if convs else None)
    if layer not in convs:
        raise ContractError(f"grad_cam needs a convolutional trunk layer, got {layer!r}; choices {convs}")
    K = spec.n_classes(task_id)
    img = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float64)
    with Tape() as tape:
        bound = bind(params)
        feats, acts = run_trunk(bound, spec, img[None], keep=True)
        z = head_logits(bound, task_id, feats)
        if class_index is None:
            class_index = int(np.argmax(z.data[0]))
        if not 0 <= class_index < K:
            raise ContractError(f"class index {class_index} outside [0, {K})")
        target = ad.tensor_sum(ad.take_rows(ad.reshape(z, (K, 1)), [class_index]))
        fmap = acts[layer]
    grads = ad.backward(target, tape)
    g = grads.get(fmap)
    g = np.zeros(fmap.shape) if g is None else g
    cam = cam_from(fmap.data[0], g[0])
    peak = cam.max()
    if peak <= 0:
        zero = np.zeros(cam.shape)
        return Heatmap(np.zeros(img.shape[1:]), zero, layer, task_id, class_index, degenerate=True)
    native = cam / peak
    up = _resize(native, img.shape[1:])
    up = up / up.max() if up.max() > 0 else up
    return Heatmap(up, native, layer, task_id, class_index)


def overlay(image: np.ndarray, heatmap: Heatmap, alpha: float = 0.5) -> np.ndarray:
    """RGB [h, w, 3] blend of the image with a jet-coloured heatmap."""
    from matplotlib import colormaps

    rgb = np.clip(np.asarray(image).transpose(1, 2, 0), 0, 1)
    heat = colormaps["jet"](heatmap.values)[..., :3]
    return np.clip((1 - alpha) * rgb + alpha * heat, 0, 1)


def save_heatmap(path, heatmap: Heatmap, image: Optional[np.ndarray] = None) -> Path:
    """Grayscale PNG of the heatmap, a JSON sidecar and, given the image, an overlay PNG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    plt.imsave(path, heatmap.values, cmap="gray", vmin=0.0, vmax=1.0)
    path.with_suffix(".json").write_text(json.dumps(heatmap.sidecar(), indent=2))
    if image is not None:
        plt.imsave(path.with_name(path.stem + "_overlay.png"), overlay(image, heatmap))
    return path


def mask_contrast(heatmap: Heatmap, mask: np.ndarray):
    """Mean native-resolution heat inside vs outside a full-resolution mask.

    The mask is pooled to the heatmap grid (a cell counts as inside when any
    of its pixels is)."""
    h, w = heatmap.native.shape
    H, W = mask.shape
    fy, fx = H // h, W // w
    cells = mask[: h * fy, : w * fx].reshape(h, fy, w, fx).any(axis=(1, 3))
    inside = heatmap.native[cells]
    outside = heatmap.native[~cells]
    return (float(inside.mean()) if inside.size else 0.0, float(outside.mean()) if outside.size else 0.0)
