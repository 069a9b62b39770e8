"""PNG figures for experiment reports (matplotlib, non-interactive backend).

Each figure carries the run's config hash in its PNG ``Description`` field.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .pipeline import RunContext  # noqa: E402


def _save(ctx: RunContext, fig, rel: str) -> None:
    path = ctx._record(rel)
    fig.savefig(path, dpi=110, metadata={"Description": "; ".join(ctx.header())})
    plt.close(fig)


def plot_invariance(ctx: RunContext) -> None:
    orders = sorted(ctx.scan)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.semilogy(orders, [100 * ctx.scan[k][0] for k in orders], "o-", label="training")
    ax.semilogy(orders, [100 * ctx.scan[k][1] for k in orders], "s--", label="test")
    ax.set_xlabel("polynomial order")
    ax.set_ylabel("invariance error [%]")
    ax.set_xticks(orders)
    ax.legend()
    fig.tight_layout()
    _save(ctx, fig, "figures/invariance.png")


def plot_forecast(ctx: RunContext) -> None:
    curve = ctx.nmte_curve
    dt = ctx.eta_test.dt
    t = dt * np.arange(len(curve))
    k = len(ctx.forecast_lifted)
    fig, (a1, a2) = plt.subplots(2, 1, figsize=(6, 5), sharex=True)
    a1.plot(t[:k], ctx.Y_test[0][:k, 0], "k", lw=1, label="test data")
    a1.plot(t[:k], ctx.forecast_lifted[:, 0], "C0--", lw=1, label="reduced model")
    a1.set_ylabel("first coordinate")
    a1.legend(loc="upper right")
    a2.plot(t, curve, "C3")
    a2.axhline(ctx.cfg.diagnostics.horizon_threshold, color="grey", ls=":")
    a2.set_ylim(0, max(2 * ctx.cfg.diagnostics.horizon_threshold, 1e-3))
    a2.set_xlabel("time")
    a2.set_ylabel("NMTE")
    fig.tight_layout()
    _save(ctx, fig, "figures/forecast.png")


def plot_mle(ctx: RunContext) -> None:
    fig, ax = plt.subplots(figsize=(5.5, 3.8))
    for est, label, c in ((ctx.mle_system, "full system", "k"), (ctx.mle_model, "reduced model", "C0")):
        if est is None:
            continue
        t, y = est.curve[:, 0], est.curve[:, 1]
        ax.plot(t, y, color=c, lw=1, label=f"{label}: {est.mle:.4f}")
        t0, t1 = est.fit_window
        sel = (t >= t0) & (t <= t1)
        if sel.any():
            icpt = np.mean(y[sel] - est.mle * t[sel])
            ax.plot(t[sel], icpt + est.mle * t[sel], color=c, ls="--", lw=2)
    ax.set_xlabel("time")
    ax.set_ylabel("mean log separation")
    ax.legend()
    fig.tight_layout()
    _save(ctx, fig, "figures/lyapunov.png")


def plot_density(ctx: RunContext) -> None:
    dens = ctx.density.per_coordinate
    n = len(dens)
    cols = min(4, n)
    rows = int(np.ceil(n / cols))
    fig, axes = plt.subplots(rows, cols, figsize=(3 * cols, 2.4 * rows), squeeze=False)
    for j, (ax, c) in enumerate(zip(axes.flat, dens)):
        ax.plot(c.grid, c.density_ref, "k", lw=1, label="data")
        ax.plot(c.grid, c.density_model, "C0--", lw=1, label="model")
        ax.set_title(f"coordinate {j + 1}: L1 {c.l1_distance:.3f}", fontsize=8)
    for ax in list(axes.flat)[n:]:
        ax.axis("off")
    axes.flat[0].legend(fontsize=7)
    fig.tight_layout()
    _save(ctx, fig, "figures/density.png")


def plot_reduced(ctx: RunContext) -> None:
    E = ctx.eta_test.stacked()
    E = E[:: max(1, len(E) // 20000)]
    fig = plt.figure(figsize=(5, 4))
    if E.shape[1] >= 3:
        ax = fig.add_subplot(projection="3d")
        ax.plot(E[:, 0], E[:, 1], E[:, 2], lw=0.3)
        ax.set_zlabel("reduced 3")
    else:
        ax = fig.add_subplot()
        ax.plot(E[:, 0], E[:, 1], lw=0.3)
    ax.set_xlabel("reduced 1")
    ax.set_ylabel("reduced 2")
    fig.tight_layout()
    _save(ctx, fig, "figures/reduced_coordinates.png")


def render_figures(ctx: RunContext) -> None:
    if ctx.scan:
        plot_invariance(ctx)
    if ctx.eta_test is not None and ctx.eta_test.state_dim >= 2:
        plot_reduced(ctx)
    if ctx.nmte_curve is not None:
        plot_forecast(ctx)
    if ctx.mle_system is not None or ctx.mle_model is not None:
        plot_mle(ctx)
    if ctx.density is not None:
        plot_density(ctx)
