"""De-identified eGFR trend charts and incremental prefix series.

Rendering uses matplotlib's Agg canvas with the bundled DejaVu font and
encodes through Pillow, which writes no text chunks, so identical specs
give identical PNG bytes.
"""

from __future__ import annotations

import dataclasses
import datetime as dt
import hashlib
import io
import math
import threading
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure
from PIL import Image

from nephro.domain import PatientRecord
from nephro.errors import DomainError

WIDTH_PX = 800
HEIGHT_PX = 600
Y_LABEL = "eGFR (mL/min/1.73m²)"
X_LABEL = "Date"
TITLE = "eGFR trend"
DEFAULT_Y_TOP = 120.0

_MAX_X_TICKS = 6
_DPI = 100
# matplotlib font and text caches are process-global
_RENDER_LOCK = threading.Lock()


@dataclasses.dataclass(frozen=True)
class ChartSpec:
    points: tuple[tuple[dt.date, float], ...]
    width_px: int = WIDTH_PX
    height_px: int = HEIGHT_PX
    y_label: str = Y_LABEL
    x_label: str = X_LABEL
    title: str = TITLE

    def __post_init__(self) -> None:
        if not isinstance(self.points, tuple):
            object.__setattr__(self, "points", tuple(tuple(p) for p in self.points))

    @classmethod
    def for_prefix(cls, patient: PatientRecord, prefix_length: int,
                   width_px: int = WIDTH_PX, height_px: int = HEIGHT_PX) -> "ChartSpec":
        obs = patient.observations[:prefix_length]
        return cls(tuple((o.date, float(o.egfr)) for o in obs), width_px, height_px)

    def check(self) -> None:
        if len(self.points) < 2:
            raise DomainError(f"a chart needs at least 2 points, got {len(self.points)}")
        dates = [d for d, _ in self.points]
        if any(b <= a for a, b in zip(dates, dates[1:])):
            raise DomainError("chart points must be strictly increasing in date")


def y_axis_top(max_egfr: float) -> float:
    """120 unless the data exceeds it, then the next multiple of 20."""
    if max_egfr <= DEFAULT_Y_TOP:
        return DEFAULT_Y_TOP
    return 20.0 * math.ceil(max_egfr / 20.0)


def _x_ticks(dates: Sequence[dt.date]) -> list[int]:
    idx = np.linspace(0, len(dates) - 1, min(len(dates), _MAX_X_TICKS)).round().astype(int)
    return sorted(set(int(i) for i in idx))


class _Canvas:
    """One reusable figure per canvas size; every render resets all mutable state."""

    def __init__(self, width_px: int, height_px: int):
        self.fig = Figure(figsize=(width_px / _DPI, height_px / _DPI), dpi=_DPI)
        FigureCanvasAgg(self.fig)
        self.ax = self.fig.add_axes((0.11, 0.16, 0.85, 0.75))
        (self.line,) = self.ax.plot([], [], marker="o", color="#1f77b4", linewidth=2.0, markersize=6)
        self.ax.grid(True, color="#dddddd", linewidth=0.8)

    def draw(self, spec: ChartSpec) -> np.ndarray:
        dates = [d for d, _ in spec.points]
        x = np.array([d.toordinal() for d in dates], dtype=float)
        y = np.array([v for _, v in spec.points], dtype=float)
        top = y_axis_top(float(y.max()))
        pad = max(5.0, 0.03 * (x[-1] - x[0]))
        ax = self.ax
        self.line.set_data(x, y)
        ax.set_xlim(x[0] - pad, x[-1] + pad)
        ax.set_ylim(0.0, top)
        ax.set_yticks(np.arange(0.0, top + 1e-9, 20.0))
        ticks = _x_ticks(dates)
        ax.set_xticks(x[ticks], [dates[i].isoformat() for i in ticks], rotation=30, ha="right")
        ax.set_xlabel(spec.x_label)
        ax.set_ylabel(spec.y_label)
        # explicit title y skips matplotlib's auto title placement
        ax.set_title(spec.title, y=1.01)
        return figure_rgb(self.fig)


_CANVASES: dict[tuple[int, int], _Canvas] = {}


def render_chart(spec: ChartSpec) -> bytes:
    """Render ``spec`` as an 8-bit RGB PNG of exactly width_px x height_px."""
    spec.check()
    size = (spec.width_px, spec.height_px)
    with _RENDER_LOCK:
        canvas = _CANVASES.get(size)
        if canvas is None:
            canvas = _CANVASES[size] = _Canvas(*size)
        rgb = canvas.draw(spec)
    return encode_png(rgb)


def figure_rgb(fig: Figure) -> np.ndarray:
    fig.canvas.draw()
    return np.asarray(fig.canvas.buffer_rgba())[..., :3].copy()


def encode_png(rgb: np.ndarray) -> bytes:
    """PNG bytes with no metadata chunks, so equal pixels give equal bytes."""
    buf = io.BytesIO()
    Image.fromarray(rgb).save(buf, format="PNG", compress_level=1)
    return buf.getvalue()


@dataclasses.dataclass(frozen=True)
class Chart:
    prefix_length: int
    spec: ChartSpec
    image: bytes


@dataclasses.dataclass(frozen=True)
class ChartSeries:
    patient_id: str
    m_p: int
    charts: tuple[Chart, ...]

    @property
    def prefix_lengths(self) -> list[int]:
        return [c.prefix_length for c in self.charts]

    def chart(self, prefix_length: int) -> Chart:
        for c in self.charts:
            if c.prefix_length == prefix_length:
                return c
        raise KeyError(prefix_length)


def series_prefix_lengths(n_obs: int, m: int) -> list[int]:
    """Prefix lengths of the series: the last M_p prefixes, M_p = min(M, N-1)."""
    m_p = max(0, min(m, n_obs - 1))
    return [n_obs - m_p + k for k in range(1, m_p + 1)]


class ChartCache:
    """Memoizes rendered bytes by spec; rendering is pure so sharing is safe.

    The cache also fixes the canvas size for every chart built through it.
    """

    def __init__(self, width_px: int = WIDTH_PX, height_px: int = HEIGHT_PX) -> None:
        if width_px < 100 or height_px < 100:
            raise DomainError(f"canvas {width_px}x{height_px} too small")
        self.width_px = width_px
        self.height_px = height_px
        self._store: dict[ChartSpec, bytes] = {}
        self._lock = threading.Lock()

    def spec_for(self, patient: PatientRecord, prefix_length: int) -> ChartSpec:
        return ChartSpec.for_prefix(patient, prefix_length, self.width_px, self.height_px)

    def put(self, spec: ChartSpec, image: bytes) -> None:
        with self._lock:
            self._store[spec] = image

    def render(self, spec: ChartSpec) -> bytes:
        with self._lock:
            hit = self._store.get(spec)
        if hit is not None:
            return hit
        image = render_chart(spec)
        with self._lock:
            self._store[spec] = image
        return image

    def __len__(self) -> int:
        return len(self._store)


def build_series(patient: PatientRecord, m: int, cache: Optional[ChartCache] = None) -> ChartSeries:
    render = cache.render if cache is not None else render_chart
    charts = []
    for k in series_prefix_lengths(patient.n_obs, m):
        spec = cache.spec_for(patient, k) if cache is not None else ChartSpec.for_prefix(patient, k)
        charts.append(Chart(k, spec, render(spec)))
    return ChartSeries(patient.id, len(charts), tuple(charts))


def render_prefix(patient: PatientRecord, prefix_length: int, cache: Optional[ChartCache] = None) -> bytes:
    if not 2 <= prefix_length <= patient.n_obs:
        raise DomainError(f"prefix_length {prefix_length} outside [2, {patient.n_obs}]")
    if cache is None:
        return render_chart(ChartSpec.for_prefix(patient, prefix_length))
    return cache.render(cache.spec_for(patient, prefix_length))


def chart_path(root: Path, patient_id: str, prefix_length: int) -> Path:
    return Path(root) / patient_id / f"prefix_{prefix_length}.png"


def write_series(series: ChartSeries, root: Path) -> list[Path]:
    paths = []
    for c in series.charts:
        path = chart_path(root, series.patient_id, c.prefix_length)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(c.image)
        paths.append(path)
    return paths


def image_digest(image: bytes) -> str:
    return hashlib.sha256(image).hexdigest()
