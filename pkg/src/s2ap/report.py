"""Report emission: results.json, per-series CSV files and standalone SVG plots."""
from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

from .runner import ExperimentResult, results_json

COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd")
W, H, PAD = 480, 300, 48


def _fmt(v: float) -> str:
    return f"{v:.6g}"


def svg_plot(series: dict[str, tuple[list[float], list[float]]], title: str,
             xlabel: str = "", ylabel: str = "") -> str:
    """Line plot; a series with a single point is drawn as a marker only."""
    xs = [x for sx, _ in series.values() for x in sx]
    ys = [y for _, sy in series.values() for y in sy]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x0, x1 = x0 - 1, x1 + 1
    if y1 == y0:
        y0, y1 = y0 - 1, y1 + 1

    def px(x):
        return PAD + (x - x0) / (x1 - x0) * (W - 2 * PAD)

    def py(y):
        return H - PAD - (y - y0) / (y1 - y0) * (H - 2 * PAD)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
             f'<rect width="{W}" height="{H}" fill="white"/>',
             f'<text x="{W / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
             f'<line x1="{PAD}" y1="{H - PAD}" x2="{W - PAD}" y2="{H - PAD}" stroke="black"/>',
             f'<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{H - PAD}" stroke="black"/>',
             f'<text x="{PAD}" y="{H - PAD + 16}" font-size="10">{_fmt(x0)}</text>',
             f'<text x="{W - PAD}" y="{H - PAD + 16}" font-size="10" text-anchor="end">{_fmt(x1)}</text>',
             f'<text x="{PAD - 4}" y="{H - PAD}" font-size="10" text-anchor="end">{_fmt(y0)}</text>',
             f'<text x="{PAD - 4}" y="{PAD + 4}" font-size="10" text-anchor="end">{_fmt(y1)}</text>',
             f'<text x="{W / 2}" y="{H - 8}" text-anchor="middle" font-size="11">{escape(xlabel)}</text>',
             f'<text x="12" y="{H / 2}" font-size="11" transform="rotate(-90 12 {H / 2})" '
             f'text-anchor="middle">{escape(ylabel)}</text>']
    if y0 < 0 < y1:
        parts.append(f'<line x1="{PAD}" y1="{py(0):.2f}" x2="{W - PAD}" y2="{py(0):.2f}" '
                     f'stroke="#999" stroke-dasharray="4 3"/>')
    for i, (label, (sx, sy)) in enumerate(series.items()):
        color = COLORS[i % len(COLORS)]
        pts = [(px(x), py(y)) for x, y in zip(sx, sy)]
        if len(pts) == 1:
            parts.append(f'<circle cx="{pts[0][0]:.2f}" cy="{pts[0][1]:.2f}" r="3" fill="{color}"/>')
        elif pts:
            coords = " ".join(f"{a:.2f},{b:.2f}" for a, b in pts)
            parts.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        parts.append(f'<text x="{W - PAD}" y="{PAD + 14 * i}" font-size="11" fill="{color}" '
                     f'text-anchor="end">{escape(label)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _write_csv(path: Path, header: str, rows) -> None:
    lines = [header] + [",".join(repr(float(v)) if not isinstance(v, int) else str(v) for v in r) for r in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def emit_report(results: dict[str, ExperimentResult], path) -> None:
    """Write results.json, CSV series and SVG plots into directory ``path``.

    ``results`` maps a mode label (``baseline``, ``s2ap``, ``awp_prune``) to its
    aggregated result.  Paired files treat ``baseline`` as the original method.
    ``lambda_max.csv`` holds the s2ap series (or the only mode given);
    ``lambda_max_<mode>.csv`` holds every mode.
    """
    if not results:
        raise ValueError("no results to report")
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "results.json").write_text(results_json(results), encoding="utf-8")

        lam_series = {}
        primary = "s2ap" if "s2ap" in results else next(iter(results))
        for mode, res in results.items():
            rows = [(e + 1, v) for e, v in enumerate(res.lambda_max)]
            _write_csv(out / f"lambda_max_{mode}.csv", "epoch,value", rows)
            if mode == primary:
                _write_csv(out / "lambda_max.csv", "epoch,value", rows)
            if rows:
                lam_series[mode] = ([r[0] for r in rows], [r[1] for r in rows])
        if lam_series:
            (out / "lambda_max.svg").write_text(
                svg_plot(lam_series, "score-space lambda_max", "epoch", "lambda_max"), encoding="utf-8")

        orig, s2ap = results.get("baseline"), results.get("s2ap")
        ham_rows = []
        if orig is not None and s2ap is not None:
            ham_rows = [(t + 1, a, b, a - b) for t, (a, b) in enumerate(zip(orig.hamming, s2ap.hamming))]
        _write_csv(out / "hamming.csv", "epoch,h_orig,h_s2ap,diff", ham_rows)
        if ham_rows:
            (out / "hamming.svg").write_text(
                svg_plot({"h_orig - h_s2ap": ([r[0] for r in ham_rows], [r[3] for r in ham_rows])},
                         "mask stability difference", "epoch", "h_orig - h_s2ap"), encoding="utf-8")

        sharp_rows = []
        if orig is not None and s2ap is not None:
            sharp_rows = [(rho, orig.loss_diff[rho], s2ap.loss_diff[rho])
                          for rho in sorted(orig.loss_diff) if rho in s2ap.loss_diff]
        _write_csv(out / "sharpness.csv", "rho,orig,s2ap", sharp_rows)
        if sharp_rows:
            xs = [r[0] for r in sharp_rows]
            (out / "sharpness.svg").write_text(
                svg_plot({"orig": (xs, [r[1] for r in sharp_rows]), "s2ap": (xs, [r[2] for r in sharp_rows])},
                         "loss-difference sharpness", "rho", "sharpness"), encoding="utf-8")
    except OSError as exc:
        raise OSError(f"writing report to {out}: {exc}") from exc
