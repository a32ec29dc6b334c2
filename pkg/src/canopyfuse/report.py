"""Figure rendering for pipeline runs.

Every function draws one figure off-screen and returns it as PNG bytes;
callers decide where the file lands. The PNG encoder's ``Software`` tag is
suppressed so rerunning a command with identical inputs produces
byte-identical images.
"""

from __future__ import annotations

import io

import matplotlib

matplotlib.use("Agg", force=True)

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_DPI = 110
_HEIGHT_CMAP = "viridis"


def _render(fig) -> bytes:
    buf = io.BytesIO()
    try:
        fig.savefig(buf, format="png", dpi=_DPI, metadata={"Software": None})
    finally:
        plt.close(fig)
    return buf.getvalue()


def fig_loss_curve(trace) -> bytes:
    """Training/validation loss per epoch, with the best epoch marked."""
    epochs = [r.epoch for r in trace]
    train = [r.train_loss for r in trace]
    val = [r.val_loss for r in trace]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, train, label="train", color="tab:blue")
    ax.plot(epochs, val, label="validation", color="tab:orange")
    if val:
        best = int(np.argmin(val))
        ax.scatter([epochs[best]], [val[best]], color="tab:red", zorder=3,
                   label=f"best epoch {epochs[best]}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    return _render(fig)


def fig_height_map(raster, band: int = 0, title: str = "canopy height (m)") -> bytes:
    """Single band of a raster as an image; nodata cells are blanked."""
    data = raster.data[band]
    shown = np.ma.masked_where(~raster.valid_mask()[band], data)
    fig, ax = plt.subplots(figsize=(6, 5))
    im = ax.imshow(shown, origin="upper", cmap=_HEIGHT_CMAP, interpolation="nearest")
    fig.colorbar(im, ax=ax, shrink=0.85)
    ax.set_title(title)
    ax.set_xlabel("column")
    ax.set_ylabel("row")
    fig.tight_layout()
    return _render(fig)


def fig_label_map(labels, counts) -> bytes:
    """Sparse label plane next to the per-pixel record counts."""
    shown = np.ma.masked_where(counts == 0, labels)
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(10, 4.5))
    im0 = ax0.imshow(shown, origin="upper", cmap=_HEIGHT_CMAP, interpolation="nearest")
    fig.colorbar(im0, ax=ax0, shrink=0.8)
    ax0.set_title("fused footprint heights (m)")
    im1 = ax1.imshow(counts, origin="upper", cmap="magma", interpolation="nearest")
    fig.colorbar(im1, ax=ax1, shrink=0.8)
    ax1.set_title("records per pixel")
    for ax in (ax0, ax1):
        ax.set_xlabel("column")
        ax.set_ylabel("row")
    fig.tight_layout()
    return _render(fig)


def fig_binned_mae(binned: dict, bin_width: float = 10.0) -> bytes:
    """MAE per reference-height bin as a bar chart, annotated with counts."""
    lows = sorted(binned)
    maes = [binned[lo][0] for lo in lows]
    counts = [binned[lo][1] for lo in lows]
    fig, ax = plt.subplots(figsize=(6.5, 4))
    ax.bar([lo + bin_width / 2 for lo in lows], maes, width=bin_width * 0.9,
           color="tab:green", edgecolor="black", linewidth=0.5)
    for lo, mae, n in zip(lows, maes, counts):
        ax.annotate(f"n={n}", (lo + bin_width / 2, mae), ha="center",
                    va="bottom", fontsize=7)
    ax.set_xlabel("reference height bin (m)")
    ax.set_ylabel("MAE (m)")
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    return _render(fig)


def fig_cdf(cdf) -> bytes:
    """Cumulative height distribution as a step plot."""
    heights = [h for h, _ in cdf]
    fracs = [f for _, f in cdf]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.step(heights, fracs, where="post", color="tab:purple")
    ax.set_xlabel("height (m)")
    ax.set_ylabel("cumulative fraction")
    ax.set_ylim(0, 1.02)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    return _render(fig)


def fig_scatter(pred, ref) -> bytes:
    """Predicted vs reference heights with the 1:1 line."""
    pred = np.asarray(pred, dtype=np.float64).ravel()
    ref = np.asarray(ref, dtype=np.float64).ravel()
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.scatter(ref, pred, s=6, alpha=0.4, color="tab:blue", edgecolors="none")
    lo = float(min(ref.min(), pred.min(), 0.0))
    hi = float(max(ref.max(), pred.max(), 1.0)) * 1.05
    ax.plot([lo, hi], [lo, hi], color="black", linewidth=1, linestyle="--")
    ax.set_xlim(lo, hi)
    ax.set_ylim(lo, hi)
    ax.set_xlabel("reference height (m)")
    ax.set_ylabel("predicted height (m)")
    ax.set_aspect("equal")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    return _render(fig)


def fig_photons(photons, labels=None) -> bytes:
    """Photon cloud along a track; optionally colored by signal/noise label."""
    along = np.array([p.along_track for p in photons], dtype=np.float64)
    elev = np.array([p.elevation for p in photons], dtype=np.float64)
    fig, ax = plt.subplots(figsize=(8, 3.5))
    if labels is None:
        ax.scatter(along, elev, s=4, color="tab:gray", edgecolors="none")
    else:
        sig = np.array([lab == "signal" for lab in labels], dtype=bool)
        ax.scatter(along[~sig], elev[~sig], s=4, color="lightgray",
                   edgecolors="none", label="noise")
        ax.scatter(along[sig], elev[sig], s=4, color="tab:green",
                   edgecolors="none", label="signal")
        ax.legend(markerscale=3, loc="upper right")
    ax.set_xlabel("along-track distance (m)")
    ax.set_ylabel("elevation (m)")
    fig.tight_layout()
    return _render(fig)


def fig_steps(photons, steps) -> bytes:
    """Photon cloud with per-step canopy-top and ground segments overlaid."""
    along = np.array([p.along_track for p in photons], dtype=np.float64)
    elev = np.array([p.elevation for p in photons], dtype=np.float64)
    fig, ax = plt.subplots(figsize=(8, 3.5))
    ax.scatter(along, elev, s=4, color="lightgray", edgecolors="none")
    for i, s in enumerate(steps):
        half = (steps[1].center - steps[0].center) / 2 if len(steps) > 1 else 5.0
        kw_top = {"label": "canopy top"} if i == 0 else {}
        kw_gnd = {"label": "ground"} if i == 0 else {}
        ax.hlines(s.canopy_top, s.center - half, s.center + half,
                  color="tab:green", linewidth=2, **kw_top)
        ax.hlines(s.ground, s.center - half, s.center + half,
                  color="tab:brown", linewidth=2, **kw_gnd)
    if steps:
        ax.legend(loc="upper right")
    ax.set_xlabel("along-track distance (m)")
    ax.set_ylabel("elevation (m)")
    fig.tight_layout()
    return _render(fig)


def fig_waveform(waveform, rh=None) -> bytes:
    """Binned energy profile drawn against elevation, with RH markers."""
    n = waveform.bin_energy.size
    elev = waveform.elev0 + (np.arange(n) + 0.5) * waveform.bin_size
    fig, ax = plt.subplots(figsize=(4.5, 5))
    ax.barh(elev, waveform.bin_energy, height=waveform.bin_size * 0.95,
            color="tab:blue", edgecolor="none")
    if rh is not None:
        for pct, h in sorted(rh.heights.items()):
            ax.axhline(waveform.elev0 + h, color="tab:red", linewidth=0.8,
                       linestyle=":")
            ax.annotate(f"RH{pct}", (ax.get_xlim()[1], waveform.elev0 + h),
                        fontsize=6, ha="right", va="bottom", color="tab:red")
    ax.set_xlabel("return energy")
    ax.set_ylabel("elevation (m)")
    fig.tight_layout()
    return _render(fig)
