"""Procedural bridge silhouettes standing in for a photo corpus.

Geometry is drawn with 1-pixel strokes on a 4x supersampled canvas and box
filtered down, which gives anti-aliased lines without platform-dependent
resampling. The drawing is grayscale, replicated to three channels.
"""

from __future__ import annotations

import math

import numpy as np
from PIL import Image, ImageDraw

from ..tensor.rng import RngStream
from .corpus import Corpus, ImageTextPair

STYLES = ("arch", "truss", "suspension", "coral")
SUPERSAMPLE = 4
_STYLE_STREAM = {s: i for i, s in enumerate(STYLES)}


class _Canvas:
    def __init__(self, resolution: int, background: float):
        self.size = resolution * SUPERSAMPLE
        self.img = Image.new("L", (self.size, self.size), int(round(background * 255)))
        self.draw = ImageDraw.Draw(self.img)

    def _pt(self, x, y):
        return (x * (self.size - 1), y * (self.size - 1))

    def line(self, pts, shade: float):
        self.draw.line([self._pt(x, y) for x, y in pts], fill=int(round(shade * 255)), width=SUPERSAMPLE)

    def band(self, y0: float, shade: float):
        self.draw.rectangle([self._pt(0, y0), self._pt(1, 1)], fill=int(round(shade * 255)))

    def finish(self, resolution: int) -> np.ndarray:
        a = np.asarray(self.img, dtype=np.float32) / 255.0
        a = a.reshape(resolution, SUPERSAMPLE, resolution, SUPERSAMPLE).mean(axis=(1, 3))
        return np.repeat(a[:, :, None], 3, axis=2)


def _curve(fn, t0, t1, n=48):
    return [fn(t) for t in np.linspace(t0, t1, n)]


def _draw_arch(c, u, x0, x1, deck, ink):
    xc, half = (x0 + x1) / 2, (x1 - x0) / 2 * u(0.8, 0.95)
    rise = u(0.16, 0.26)
    spring = deck + rise
    c.line(_curve(lambda t: (xc + half * math.cos(t), spring - rise * math.sin(t)), 0, math.pi), ink)
    posts = int(u(2, 4.99))
    for k in range(1, posts + 1):
        for side in (-1, 1):
            dx = half * k / (posts + 1)
            y = spring - rise * math.sqrt(max(0.0, 1 - (dx / half) ** 2))
            c.line([(xc + side * dx, deck), (xc + side * dx, y)], ink)


def _draw_truss(c, u, x0, x1, deck, ink):
    height = u(0.12, 0.2)
    top = deck - height
    inset = (x1 - x0) * u(0.06, 0.12)
    a, b = x0 + inset, x1 - inset
    panels = int(u(4, 7.99))
    c.line([(x0, deck), (a, top), (b, top), (x1, deck)], ink)
    xs = np.linspace(a, b, panels + 1)
    for i, x in enumerate(xs):
        c.line([(x, deck), (x, top)], ink)
        if i < panels:
            if i % 2 == 0:
                c.line([(x, deck), (xs[i + 1], top)], ink)
            else:
                c.line([(x, top), (xs[i + 1], deck)], ink)


def _draw_suspension(c, u, x0, x1, deck, ink):
    span = x1 - x0
    ta, tb = x0 + span * u(0.18, 0.26), x1 - span * u(0.18, 0.26)
    top = deck - u(0.25, 0.36)
    for x in (ta, tb):
        c.line([(x, top), (x, min(deck + 0.14, 0.98))], ink)
    sag = deck - u(0.02, 0.05)
    mid = (ta + tb) / 2
    half = (tb - ta) / 2

    def cable(x):
        return sag + (top - sag) * ((x - mid) / half) ** 2

    c.line(_curve(lambda x: (x, cable(x)), ta, tb), ink)
    c.line([(x0, deck), (ta, top)], ink)
    c.line([(tb, top), (x1, deck)], ink)
    for x in np.linspace(ta, tb, int(u(5, 9.99)))[1:-1]:
        c.line([(x, cable(x)), (x, deck)], ink)


def _draw_coral(c, u, x0, x1, deck, ink):
    xc, half = (x0 + x1) / 2, (x1 - x0) / 2 * u(0.75, 0.92)
    rise = u(0.2, 0.3)
    lobes = int(u(4, 6.99))
    depth = u(0.1, 0.18)
    phase = u(0, math.pi / lobes)

    def shell(scale, lobed):
        def pt(t):
            r = scale * (1 - depth * abs(math.sin(lobes * t + phase))) if lobed else scale
            return (xc + half * r * math.cos(t), deck - rise * r * math.sin(t))
        return _curve(pt, 0, math.pi, 96)

    c.line(shell(1.0, True), ink)
    c.line(shell(u(0.5, 0.65), False), ink)
    ribs = int(u(3, 5.99))
    for k in range(1, ribs + 1):
        t = math.pi * k / (ribs + 1)
        inner = 0.55
        c.line([(xc + half * inner * math.cos(t), deck - rise * inner * math.sin(t)),
                (xc + half * 0.9 * math.cos(t), deck - rise * 0.9 * math.sin(t))], ink)


_DRAW = {"arch": _draw_arch, "truss": _draw_truss, "suspension": _draw_suspension, "coral": _draw_coral}


def render_bridge(style: str, resolution: int, rng: RngStream) -> tuple[np.ndarray, tuple[str, ...]]:
    if style not in _DRAW:
        raise ValueError(f"unknown bridge style {style!r}; choose from {STYLES}")

    def u(lo, hi):
        return float(rng.uniform(low=lo, high=hi))

    background = u(0.82, 0.96)
    ink = u(0.08, 0.28)
    canvas = _Canvas(resolution, background)
    water = u(0, 1) < 0.6
    if water:
        canvas.band(u(0.78, 0.86), background - u(0.08, 0.14))
    x0, x1 = u(0.03, 0.12), u(0.88, 0.97)
    deck = u(0.5, 0.6)
    _DRAW[style](canvas, u, x0, x1, deck, ink)
    canvas.line([(x0, deck), (x1, deck)], ink)
    tags = ["bridge"]
    if style != "coral":
        tags.append(style)
    tags += ["outdoors", "scenery", "sky"]
    if water:
        tags.append("water")
    tags.append("day")
    return canvas.finish(resolution), tuple(tags)


def synth_bridges(n: int, style: str, resolution: int = 32, rng: RngStream | None = None, seed: int = 0) -> Corpus:
    """``n`` rendered bridges of one style; captions are comma-separated scene tags.

    The coral style is the held-out target, so its captions carry no style
    word and a fine-tuned concept has to supply it.
    """
    if n < 1:
        raise ValueError("synth_bridges needs n >= 1")
    base = rng if rng is not None else RngStream(seed, stream_id=0x5EED)
    stream = base.spawn(_STYLE_STREAM.get(style, 99))
    pairs = []
    for i in range(n):
        image, tags = render_bridge(style, resolution, stream.spawn(i))
        pairs.append(ImageTextPair(image, tags, f"{style}_{i:04d}"))
    return Corpus(pairs)


def mixed_corpus(n: int, styles=("arch", "truss", "suspension"), resolution: int = 32, seed: int = 0) -> Corpus:
    """``n`` images split as evenly as possible over ``styles``."""
    parts = []
    for k, style in enumerate(styles):
        count = n // len(styles) + (1 if k < n % len(styles) else 0)
        if count:
            parts.append(synth_bridges(count, style, resolution, seed=seed))
    out = parts[0]
    for p in parts[1:]:
        out = out + p
    return out
