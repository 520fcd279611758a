"""Figure rendering: attention overlays, step-wise panels, and sweep
grids, written as PPM. Text uses a built-in 5x7 bitmap font so goldens
are bit-exact with no font dependency.
"""

import numpy as np

from .attmaps import upsample_attention

# 5x7 glyphs, one int per row, bit 4 = leftmost column.
_FONT = {
    "a": (0x00, 0x00, 0x0E, 0x01, 0x0F, 0x11, 0x0F),
    "b": (0x10, 0x10, 0x1E, 0x11, 0x11, 0x11, 0x1E),
    "c": (0x00, 0x00, 0x0E, 0x10, 0x10, 0x11, 0x0E),
    "d": (0x01, 0x01, 0x0F, 0x11, 0x11, 0x11, 0x0F),
    "e": (0x00, 0x00, 0x0E, 0x11, 0x1F, 0x10, 0x0E),
    "f": (0x06, 0x09, 0x08, 0x1C, 0x08, 0x08, 0x08),
    "g": (0x00, 0x0F, 0x11, 0x0F, 0x01, 0x11, 0x0E),
    "h": (0x10, 0x10, 0x16, 0x19, 0x11, 0x11, 0x11),
    "i": (0x04, 0x00, 0x0C, 0x04, 0x04, 0x04, 0x0E),
    "j": (0x02, 0x00, 0x06, 0x02, 0x02, 0x12, 0x0C),
    "k": (0x10, 0x10, 0x12, 0x14, 0x18, 0x14, 0x12),
    "l": (0x0C, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E),
    "m": (0x00, 0x00, 0x1A, 0x15, 0x15, 0x15, 0x15),
    "n": (0x00, 0x00, 0x16, 0x19, 0x11, 0x11, 0x11),
    "o": (0x00, 0x00, 0x0E, 0x11, 0x11, 0x11, 0x0E),
    "p": (0x00, 0x1E, 0x11, 0x1E, 0x10, 0x10, 0x10),
    "q": (0x00, 0x0F, 0x11, 0x0F, 0x01, 0x01, 0x01),
    "r": (0x00, 0x00, 0x16, 0x19, 0x10, 0x10, 0x10),
    "s": (0x00, 0x00, 0x0F, 0x10, 0x0E, 0x01, 0x1E),
    "t": (0x08, 0x08, 0x1C, 0x08, 0x08, 0x09, 0x06),
    "u": (0x00, 0x00, 0x11, 0x11, 0x11, 0x13, 0x0D),
    "v": (0x00, 0x00, 0x11, 0x11, 0x11, 0x0A, 0x04),
    "w": (0x00, 0x00, 0x11, 0x11, 0x15, 0x15, 0x0A),
    "x": (0x00, 0x00, 0x11, 0x0A, 0x04, 0x0A, 0x11),
    "y": (0x00, 0x11, 0x11, 0x0F, 0x01, 0x11, 0x0E),
    "z": (0x00, 0x00, 0x1F, 0x02, 0x04, 0x08, 0x1F),
    "0": (0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E),
    "1": (0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E),
    "2": (0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F),
    "3": (0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E),
    "4": (0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02),
    "5": (0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E),
    "6": (0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E),
    "7": (0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08),
    "8": (0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E),
    "9": (0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C),
    "<": (0x02, 0x04, 0x08, 0x10, 0x08, 0x04, 0x02),
    ">": (0x08, 0x04, 0x02, 0x01, 0x02, 0x04, 0x08),
    "-": (0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00),
    ".": (0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C),
    "=": (0x00, 0x00, 0x1F, 0x00, 0x1F, 0x00, 0x00),
    " ": (0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00),
}


def render_text(text: str) -> np.ndarray:
    """(7, 6*len(text)-1) boolean glyph raster."""
    if not text:
        return np.zeros((7, 0), dtype=bool)
    out = np.zeros((7, 6 * len(text) - 1), dtype=bool)
    for i, ch in enumerate(text):
        rows = _FONT.get(ch, _FONT["."])
        for r, bits in enumerate(rows):
            for c in range(5):
                if bits & (1 << (4 - c)):
                    out[r, 6 * i + c] = True
    return out


def _scale_nearest(image: np.ndarray, factor: int) -> np.ndarray:
    return np.repeat(np.repeat(image, factor, axis=0), factor, axis=1)


def attention_overlay(image: np.ndarray, alphas, beta_max: float = 0.6) -> np.ndarray:
    """Blend summed per-step attention (as a red heat layer) over the
    grayscale-converted image: out = (1-beta)*gray + beta*red with
    beta = beta_max * max-normalized upsampled attention."""
    if not len(alphas):
        raise ValueError("no attention history to render")
    h, w = image.shape[:2]
    total = np.sum(np.asarray(alphas), axis=0)
    heat = upsample_attention(total, w, h)
    gray = image.astype(np.float64).mean(axis=2)
    beta = beta_max * heat
    out = np.empty((h, w, 3))
    red = np.array([255.0, 0.0, 0.0])
    for ch in range(3):
        out[:, :, ch] = (1.0 - beta) * gray + beta * red[ch]
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def _caption_strip(text: str, width: int) -> np.ndarray:
    """White strip with black text, wrapped to the panel width."""
    words = text.split()
    lines, cur = [], ""
    for word in words:
        trial = word if not cur else cur + " " + word
        if 6 * len(trial) - 1 <= width or not cur:
            cur = trial
        else:
            lines.append(cur)
            cur = word
    if cur:
        lines.append(cur)
    strip = np.full((2 + 9 * max(len(lines), 1), width, 3), 255, dtype=np.uint8)
    for li, line in enumerate(lines):
        glyphs = render_text(line)
        gw = min(glyphs.shape[1], width)
        strip[2 + 9 * li:9 + 9 * li, :gw][glyphs[:, :gw]] = 0
    return strip


def panel(image: np.ndarray, alphas, text: str, scale: int = 4) -> np.ndarray:
    """One figure panel: scaled attention overlay with caption text beneath."""
    over = _scale_nearest(attention_overlay(image, alphas), scale)
    strip = _caption_strip(text, over.shape[1])
    return np.vstack([over, strip])


def panel_grid(panels, ncols: int = 4) -> np.ndarray:
    """Arrange panels row-major on a white background."""
    if not panels:
        raise ValueError("no panels")
    ph = max(p.shape[0] for p in panels)
    pw = max(p.shape[1] for p in panels)
    ncols = min(ncols, len(panels))
    nrows = -(-len(panels) // ncols)
    pad = 4
    grid = np.full((nrows * (ph + pad) + pad, ncols * (pw + pad) + pad, 3), 255,
                   dtype=np.uint8)
    for i, p in enumerate(panels):
        r, c = divmod(i, ncols)
        y = pad + r * (ph + pad)
        x = pad + c * (pw + pad)
        grid[y:y + p.shape[0], x:x + p.shape[1]] = p
    return grid


def overlay_figure(image, record, scale: int = 4) -> np.ndarray:
    """All-steps summed attention overlay with the caption underneath."""
    return panel(image, record.attention_history, " ".join(record.tokens), scale)


def stepwise_figure(image, record, scale: int = 4, ncols: int = 4) -> np.ndarray:
    """One panel per generated token, each showing that step's attention."""
    panels = [panel(image, [alpha], tok, scale)
              for tok, alpha in zip(record.tokens, record.attention_history)]
    return panel_grid(panels, ncols)


def sweep_figure(image, decodes, scale: int = 4, ncols: int = 4) -> np.ndarray:
    """Panels in parameter order, each overlaying the attention actually
    used with the resulting caption beneath."""
    panels = []
    for fd in decodes:
        text = f"{fd.policy.tag()} {' '.join(fd.record.tokens)}"
        panels.append(panel(image, fd.record.attention_history, text, scale))
    return panel_grid(panels, ncols)
