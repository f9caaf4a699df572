"""SVG rendering of explanation records and deterministic report bundles.

Colour ramp: 64 steps, step ``k`` (0..63) is
``round(BLUE + (RED - BLUE) * k / 63)`` per channel with
``BLUE = (30, 136, 229)`` and ``RED = (255, 13, 87)``; a scalar ``t`` in
[0, 1] maps to step ``min(63, floor(64 * t))``.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
import re
import tempfile
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from pathlib import Path

import jsonschema

from .errors import ValidationError, XaiError

BLUE = (30, 136, 229)
RED = (255, 13, 87)
RAMP_STEPS = 64


class BundleIOError(XaiError, OSError):
    exit_code = 2


def ramp_color(t: float) -> str:
    t = 0.0 if not math.isfinite(t) else min(max(t, 0.0), 1.0)
    k = min(RAMP_STEPS - 1, int(math.floor(t * RAMP_STEPS)))
    rgb = [round(b + (r - b) * k / (RAMP_STEPS - 1)) for b, r in zip(BLUE, RED)]
    return "#{:02x}{:02x}{:02x}".format(*rgb)


_NUM = {"type": "number"}
_ROWS = {"type": "array", "items": {"type": "object"}}
SCHEMAS = {
    "bar": {
        "type": "object",
        "required": ["kind"],
        "properties": {"kind": {"enum": ["summary", "perm_importance", "feature_importance",
                                         "lime"]},
                       "rows": {"type": "array", "items": {"type": "object",
                                                           "required": ["feature"]}},
                       "contributions": {"type": "array",
                                         "items": {"type": "object",
                                                   "required": ["feature", "weight"]}}},
    },
    "beeswarm_scatter": {
        "type": "object",
        "required": ["kind", "features", "points"],
        "properties": {"kind": {"const": "beeswarm"},
                       "features": {"type": "array", "items": {"type": "string"}},
                       "points": {"type": "object",
                                  "additionalProperties": {
                                      "type": "array",
                                      "items": {"type": "object",
                                                "required": ["phi", "value", "color"]}}}},
    },
    "pdp_scatter": {
        "type": "object",
        "required": ["kind", "feature", "grid", "mean_response"],
        "properties": {"kind": {"const": "pdp"}, "feature": {"type": "string"},
                       "grid": {"type": "array", "items": _NUM, "minItems": 1},
                       "mean_response": {"type": "array", "items": _NUM, "minItems": 1}},
    },
    "force": {
        "type": "object",
        "required": ["kind", "base_value", "model_output", "positive", "negative"],
        "properties": {"kind": {"const": "force"}, "base_value": _NUM, "model_output": _NUM,
                       "positive": _ROWS, "negative": _ROWS},
    },
    "heatmap": {
        "type": "object",
        "required": ["kind", "grid"],
        "properties": {"kind": {"const": "heatmap"},
                       "grid": {"type": "array", "minItems": 1,
                                "items": {"type": "array", "minItems": 1, "items": _NUM}}},
    },
}

PLOT_FOR_KIND = {"summary": "bar", "perm_importance": "bar", "feature_importance": "bar",
                 "lime": "bar", "beeswarm": "beeswarm_scatter", "pdp": "pdp_scatter",
                 "force": "force", "heatmap": "heatmap"}


@dataclass(frozen=True)
class PlotSpec:
    kind: str
    payload: dict
    title: str = ""
    x_label: str = ""
    y_label: str = ""
    width: int = 640
    height: int = 400


def validate(spec: PlotSpec) -> None:
    if spec.kind not in SCHEMAS:
        raise ValidationError(f"unknown plot kind {spec.kind!r}")
    if spec.width <= 0 or spec.height <= 0:
        raise ValidationError("plot width and height must be positive")
    err = jsonschema.exceptions.best_match(
        jsonschema.Draft7Validator(SCHEMAS[spec.kind]).iter_errors(spec.payload))
    if err is not None:
        where = "/".join(str(p) for p in err.absolute_path) or "<payload>"
        raise ValidationError(f"{spec.kind} payload invalid at field '{where}': {err.message}")


_XML_INVALID = re.compile("[^\t\n\r\x20-\ud7ff\ue000-\ufffd\U00010000-\U0010ffff]")


def _xml_text(s) -> str:
    """Replace characters XML 1.0 cannot carry (control codes, lone surrogates)."""
    return _XML_INVALID.sub("\ufffd", str(s))


def _f(v: float) -> str:
    return f"{v:.2f}"


def _label(v: float) -> str:
    return f"{v:.4g}"


class _Canvas:
    def __init__(self, spec: PlotSpec):
        self.spec = spec
        self.root = ET.Element("svg", {
            "xmlns": "http://www.w3.org/2000/svg", "version": "1.1",
            "width": str(spec.width), "height": str(spec.height),
            "viewBox": f"0 0 {spec.width} {spec.height}"})
        ET.SubElement(self.root, "rect", {"class": "background", "x": "0", "y": "0",
                                          "width": str(spec.width), "height": str(spec.height),
                                          "fill": "#ffffff"})
        self.left, self.right, self.top, self.bottom = 140, 20, 40, 50
        if spec.title:
            self.text(spec.width / 2, 22, spec.title, anchor="middle", size=15, cls="title")
        if spec.x_label:
            self.text(spec.width / 2, spec.height - 10, spec.x_label, anchor="middle",
                      cls="x-label")
        if spec.y_label:
            t = self.text(16, spec.height / 2, spec.y_label, anchor="middle", cls="y-label")
            t.set("transform", f"rotate(-90 16 {_f(spec.height / 2)})")

    @property
    def plot_w(self):
        return max(1.0, self.spec.width - self.left - self.right)

    @property
    def plot_h(self):
        return max(1.0, self.spec.height - self.top - self.bottom)

    def el(self, tag, **attrs):
        return ET.SubElement(self.root, tag, {k.rstrip("_").replace("_", "-"): _xml_text(v)
                                              for k, v in attrs.items()})

    def text(self, x, y, s, anchor="start", size=11, cls="label"):
        t = self.el("text", x=_f(x), y=_f(y), font_size=size, text_anchor=anchor,
                    font_family="sans-serif", class_=cls)
        t.text = _xml_text(s)
        return t

    def tostring(self) -> str:
        ET.indent(self.root)
        return ET.tostring(self.root, encoding="unicode") + "\n"


def _bar_items(payload):
    if payload["kind"] == "lime":
        return [(r["feature"], float(r["weight"])) for r in payload.get("contributions", [])]
    items = []
    for i, r in enumerate(payload.get("rows", [])):
        value = r.get("score", r.get("mean_drop"))
        if not isinstance(value, (int, float)):
            raise ValidationError(f"bar payload invalid at field 'rows/{i}': no numeric score")
        items.append((r["feature"], float(value)))
    return items


def _render_bar(c: _Canvas, payload):
    items = _bar_items(payload)
    peak = max((abs(v) for _, v in items), default=0.0) or 1.0
    n = max(1, len(items))
    slot = c.plot_w / n
    base_y = c.top + c.plot_h
    c.el("line", x1=_f(c.left), y1=_f(base_y), x2=_f(c.left + c.plot_w), y2=_f(base_y),
         stroke="#333333", class_="axis")
    for i, (name, v) in enumerate(items):
        h = abs(v) / peak * c.plot_h
        x = c.left + i * slot + 0.15 * slot
        c.el("rect", class_="bar", x=_f(x), y=_f(base_y - h), width=_f(0.7 * slot),
             height=_f(h), fill=RED_HEX if v >= 0 else BLUE_HEX, data_value=_label(v))
        t = c.text(x + 0.35 * slot, base_y + 12, name, anchor="end", size=9)
        t.set("transform", f"rotate(-45 {_f(x + 0.35 * slot)} {_f(base_y + 12)})")


def _scale(lo, hi, a, b):
    if hi <= lo:
        lo, hi = lo - 0.5, hi + 0.5
    return lambda v: a + (v - lo) / (hi - lo) * (b - a)


def _render_beeswarm(c: _Canvas, payload):
    feats = payload["features"]
    allphi = [p["phi"] for f in feats for p in payload["points"].get(f, [])]
    sx = _scale(min(allphi, default=0.0), max(allphi, default=0.0), c.left, c.left + c.plot_w)
    row_h = c.plot_h / max(1, len(feats))
    zero = sx(0.0) if allphi else c.left
    c.el("line", x1=_f(zero), y1=_f(c.top), x2=_f(zero), y2=_f(c.top + c.plot_h),
         stroke="#999999", class_="zero")
    for r, f in enumerate(feats):
        cy = c.top + (r + 0.5) * row_h
        c.text(c.left - 6, cy + 4, f, anchor="end")
        occupied: dict[int, int] = {}
        for p in payload["points"].get(f, []):
            x = sx(p["phi"])
            b = int(x // 3)
            k = occupied.get(b, 0)
            occupied[b] = k + 1
            offset = ((k + 1) // 2) * 3.0 * (1 if k % 2 else -1)
            offset = max(-row_h / 2 + 2, min(row_h / 2 - 2, offset))
            c.el("circle", class_="point", cx=_f(x), cy=_f(cy + offset), r="2.5",
                 fill=ramp_color(p["color"]))


def _render_pdp(c: _Canvas, payload):
    grid, resp = payload["grid"], payload["mean_response"]
    if len(grid) != len(resp):
        raise ValidationError("pdp payload invalid at field 'mean_response': length differs "
                              "from 'grid'")
    scatter = payload.get("scatter") or {}
    pts = scatter.get("points", [])
    xs = list(grid) + [p["x"] for p in pts]
    ys = list(resp) + [p["phi"] for p in pts]
    sx = _scale(min(xs), max(xs), c.left, c.left + c.plot_w)
    sy = _scale(min(ys), max(ys), c.top + c.plot_h, c.top)
    for p in pts:
        c.el("circle", class_="scatter", cx=_f(sx(p["x"])), cy=_f(sy(p["phi"])), r="2.5",
             fill=ramp_color(p["color"]), fill_opacity="0.7")
    c.el("polyline", class_="pdp", fill="none", stroke="#333333", stroke_width="2",
         points=" ".join(f"{_f(sx(g))},{_f(sy(v))}" for g, v in zip(grid, resp)))
    for g, v in zip(grid, resp):
        c.el("circle", class_="grid-point", cx=_f(sx(g)), cy=_f(sy(v)), r="3", fill="#333333")
    c.text(c.left, c.top + c.plot_h + 16, _label(min(xs)))
    c.text(c.left + c.plot_w, c.top + c.plot_h + 16, _label(max(xs)), anchor="end")
    c.text(c.left - 6, c.top + c.plot_h, _label(min(ys)), anchor="end")
    c.text(c.left - 6, c.top + 10, _label(max(ys)), anchor="end")


def _render_force(c: _Canvas, payload):
    base = float(payload["base_value"])
    pos = [(r["feature"], float(r["phi"])) for r in payload["positive"]]
    neg = [(r["feature"], float(r["phi"])) for r in payload["negative"]]
    hi = base + sum(v for _, v in pos)
    lo = base + sum(v for _, v in neg)
    sx = _scale(min(lo, base), max(hi, base), c.left, c.left + c.plot_w)
    mid = c.top + c.plot_h / 2
    cursor = base
    for name, v in pos:
        x0, x1 = sx(cursor), sx(cursor + v)
        c.el("rect", class_="push-up", x=_f(x0), y=_f(mid - 15), width=_f(x1 - x0), height="30",
             fill=RED_HEX, data_value=_label(v))
        c.text((x0 + x1) / 2, mid - 20, name, anchor="middle", size=9)
        cursor += v
    cursor = base
    for name, v in neg:
        x1, x0 = sx(cursor), sx(cursor + v)
        c.el("rect", class_="push-down", x=_f(x0), y=_f(mid - 15), width=_f(x1 - x0),
             height="30", fill=BLUE_HEX, data_value=_label(v))
        c.text((x0 + x1) / 2, mid + 30, name, anchor="middle", size=9)
        cursor += v
    xb = sx(base)
    c.el("line", class_="base", x1=_f(xb), y1=_f(mid - 30), x2=_f(xb), y2=_f(mid + 30),
         stroke="#333333", stroke_width="2")
    c.text(xb, mid + 45, f"base value {_label(base)}", anchor="middle")
    if pos or neg:
        xo = sx(float(payload["model_output"]))
        c.el("line", class_="output", x1=_f(xo), y1=_f(mid - 30), x2=_f(xo), y2=_f(mid + 30),
             stroke="#000000", stroke_dasharray="4 2")
        c.text(xo, mid - 35, f"f(x) = {_label(float(payload['model_output']))}", anchor="middle")


def _render_heatmap(c: _Canvas, payload):
    grid = payload["grid"]
    rows, cols = len(grid), len(grid[0])
    if any(len(r) != cols for r in grid):
        raise ValidationError("heatmap payload invalid at field 'grid': ragged rows")
    cell = min(c.plot_w / cols, c.plot_h / rows)
    flat = [v for r in grid for v in r]
    lo, hi = min(flat), max(flat)
    span = hi - lo
    for i, r in enumerate(grid):
        for j, v in enumerate(r):
            t = (v - lo) / span if span > 0 else 0.0
            c.el("rect", class_="cell", x=_f(c.left + j * cell), y=_f(c.top + i * cell),
                 width=_f(cell), height=_f(cell), fill=ramp_color(t), data_row=i, data_col=j,
                 data_value=_label(v))


RED_HEX = "#{:02x}{:02x}{:02x}".format(*RED)
BLUE_HEX = "#{:02x}{:02x}{:02x}".format(*BLUE)
_RENDERERS = {"bar": _render_bar, "beeswarm_scatter": _render_beeswarm,
              "pdp_scatter": _render_pdp, "force": _render_force, "heatmap": _render_heatmap}


def render_svg(spec: PlotSpec) -> str:
    """Render ``spec`` as an SVG 1.1 document; a pure function of ``spec``."""
    validate(spec)
    canvas = _Canvas(spec)
    _RENDERERS[spec.kind](canvas, spec.payload)
    return canvas.tostring()


def dumps(doc) -> str:
    return json.dumps(doc, indent=1, sort_keys=True, allow_nan=False) + "\n"


def atomic_write(path: Path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def emit_bundle(reports, out_dir, seeds=None, timestamp: str | None = None) -> dict:
    """Write ``<name>.json`` and ``<name>.svg`` for each report plus ``manifest.json``.

    ``reports`` is a sequence of dicts with ``name`` and ``payload`` and
    optional ``plot``/``title``/``x_label``/``y_label``. Records without a
    plot kind are written as JSON only. Output is byte-identical for
    identical inputs unless a ``timestamp`` is supplied.
    """
    from . import __version__

    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = tempfile.NamedTemporaryFile(dir=out, prefix=".probe", delete=True)
        probe.close()
    except OSError as exc:
        raise BundleIOError(f"output directory {out} is not writable: {exc.strerror}") from None

    entries = []
    names = set()
    for rep in reports:
        name, payload = rep["name"], rep["payload"]
        if name in names:
            raise ValidationError(f"duplicate report name {name!r}")
        names.add(name)
        files = [(f"{name}.json", dumps(payload))]
        plot = rep.get("plot", PLOT_FOR_KIND.get(payload.get("kind")))
        if plot is not None:
            spec = PlotSpec(plot, payload, rep.get("title", name), rep.get("x_label", ""),
                            rep.get("y_label", ""), rep.get("width", 640), rep.get("height", 400))
            files.append((f"{name}.svg", render_svg(spec)))
        for fname, text in files:
            try:
                atomic_write(out / fname, text)
            except OSError as exc:
                raise BundleIOError(f"cannot write {out / fname}: {exc.strerror}") from None
            entries.append({"path": fname, "kind": payload.get("kind"),
                            "sha256": hashlib.sha256(text.encode("utf-8")).hexdigest()})
    entries.append({"path": "manifest.json", "kind": "manifest"})
    manifest = {"version": __version__, "files": entries, "seeds": dict(seeds or {})}
    if timestamp is not None:
        manifest["timestamp"] = timestamp
    try:
        atomic_write(out / "manifest.json", dumps(manifest))
    except OSError as exc:
        raise BundleIOError(f"cannot write {out / 'manifest.json'}: {exc.strerror}") from None
    return manifest
