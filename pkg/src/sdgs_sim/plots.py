"""Report figures, rendered off-screen to PNG files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .link import HANDOVER_ORDER  # noqa: E402

_STATE_COLOURS = {"PRE_WARN": "#fde9b5", "PRE_WARM": "#f9c98a", "SWITCHING": "#e57373", "CLEANUP": "#cccccc"}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    return path


def plot_run_residuals(controlled, reference, path) -> Path:
    """Open- vs closed-loop residuals over one controlled/reference run pair."""
    fig, (ax_t, ax_f) = plt.subplots(2, 1, figsize=(8, 5.5), sharex=True)
    t = np.array([r.t_s for r in controlled.rows])
    ax_t.plot([r.t_s for r in reference.rows], [r.dtau_open_us for r in reference.rows], lw=0.6,
              color="0.55", label=f"{reference.run_id} open-loop")
    ax_t.plot(t, [r.dtau_closed_us for r in controlled.rows], lw=0.6, color="C0",
              label=f"{controlled.run_id} closed-loop")
    ax_f.plot([r.t_s for r in reference.rows], [r.dcfo_open_hz for r in reference.rows], lw=0.6, color="0.55")
    ax_f.plot(t, [r.dcfo_closed_hz for r in controlled.rows], lw=0.6, color="C1")
    states = [r.handover_state for r in controlled.rows]
    for ax in (ax_t, ax_f):
        start = 0
        for i in range(1, len(states) + 1):
            if i == len(states) or states[i] != states[start]:
                colour = _STATE_COLOURS.get(states[start])
                if colour:
                    ax.axvspan(t[start], t[i - 1], color=colour, alpha=0.5, lw=0)
                start = i
    ax_t.set_ylabel("residual TA (us)")
    ax_f.set_ylabel("residual CFO (Hz)")
    ax_f.set_xlabel("time in run (s)")
    ax_t.legend(loc="upper left", fontsize=8)
    ax_t.set_title(f"{controlled.station}: residuals (shaded: handover preparation)")
    return _save(fig, path)


def plot_state_fractions(counts: dict, path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.2))
    modes = list(counts)
    left = np.zeros(len(modes))
    for i, st in enumerate(HANDOVER_ORDER):
        vals = np.array([counts[m][st.value][1] for m in modes])
        ax.barh(modes, vals, left=left, label=st.value, color=f"C{i}")
        left += vals
    ax.set_xlabel("rows (%)")
    ax.legend(fontsize=7, ncol=5, loc="lower center", bbox_to_anchor=(0.5, 1.0))
    return _save(fig, path)


def plot_percentiles(mc, path) -> Path:
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.2))
    for ax, key, unit in ((axes[0], "ta", "us"), (axes[1], "cfo", "Hz")):
        pairs = [("open", getattr(mc, f"{key}_open_{unit.lower()}"))]
        closed = getattr(mc, f"{key}_closed_{unit.lower()}")
        if closed is not None:
            pairs.append(("closed", closed))
        x = np.arange(3)
        for j, (label, p) in enumerate(pairs):
            ax.bar(x + 0.4 * j, [p.p50, p.p95, p.p99], width=0.4, label=label)
        ax.set_xticks(x + 0.2, ["P50", "P95", "P99"])
        ax.set_yscale("log")
        ax.set_title(f"|residual {key.upper()}| ({unit})")
        ax.legend(fontsize=8)
    return _save(fig, path)


def plot_sweep(rows, path) -> Path:
    fig, ax1 = plt.subplots(figsize=(6, 3.2))
    labels = [f"{r.t_fb_ms:g}/{r.d_fb_ms:g} ms" for r in rows]
    ta = [r.ta_p95_us if r.stable else np.nan for r in rows]
    cfo = [r.cfo_p95_hz if r.stable else np.nan for r in rows]
    ax1.plot(labels, ta, "o-", color="C0")
    ax1.set_ylabel("TA P95 (us)", color="C0")
    ax2 = ax1.twinx()
    ax2.plot(labels, cfo, "s--", color="C1")
    ax2.set_ylabel("CFO P95 (Hz)", color="C1")
    ax1.set_xlabel("T_fb / d_fb")
    return _save(fig, path)


def plot_loop_response(pid, plant, path) -> Path:
    from .loop_analysis import closed_loop_response, error_attenuation

    nyq = 0.5 / pid.t_fb_s
    freqs = tuple(np.geomspace(nyq * 1e-3, nyq * 0.999, 200))
    resp = closed_loop_response(pid, type(plant)(plant.plant_gain, plant.plant_pole, freqs))
    f = np.array([p[0] for p in resp.points])
    mag = np.array([p[1] for p in resp.points])
    fig, ax = plt.subplots(figsize=(6, 3.2))
    ax.loglog(f, mag, label="|T_cl|")
    ax.loglog(f, [error_attenuation(pid, x, plant) for x in f], label="|1 - T_cl|")
    ax.set_xlabel("frequency (Hz)")
    ax.set_title(f"delay index {pid.delay_index}, {'stable' if resp.stable else 'UNSTABLE'}")
    ax.legend(fontsize=8)
    return _save(fig, path)
