"""PNG overlays of predicted contours on the DWI slice."""
from pathlib import Path

import numpy as np
from PIL import Image

from .data import CORE, PENUMBRA
from .morphology import inner_contour

PENUMBRA_COLOR = (0, 255, 0)
CORE_COLOR = (255, 0, 0)
LEGEND = "penumbra-green_core-red"


def _to_gray(slice2d):
    lo, hi = float(slice2d.min()), float(slice2d.max())
    if hi <= lo:
        return np.zeros(slice2d.shape, dtype=np.uint8)
    return np.round(255.0 * (slice2d - lo) / (hi - lo)).astype(np.uint8)


def render_overlay(background, labels) -> np.ndarray:
    """RGB image: grayscale background with 1-px contours of the penumbra and core regions."""
    gray = _to_gray(np.asarray(background, dtype=np.float64))
    rgb = np.repeat(gray[..., None], 3, axis=2)
    # penumbra contour traces the whole lesion (penumbra plus enclosed core)
    rgb[inner_contour(labels >= PENUMBRA)] = PENUMBRA_COLOR
    rgb[inner_contour(labels == CORE)] = CORE_COLOR
    return rgb


def write_overlays(dwi, pred, out_dir) -> list:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for z in range(pred.shape[0]):
        path = out_dir / f"slice{z:03d}_{LEGEND}.png"
        Image.fromarray(render_overlay(dwi[z], pred[z]), mode="RGB").save(path, format="PNG")
        paths.append(path)
    return paths
