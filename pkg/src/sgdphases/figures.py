"""Canned desk-scale recipes that emit figure data (CSV) plus gnuplot scripts.

Runs are cached on the :class:`FigureRunner`, so e.g. ``fig3 fig4 fig5``
train the noisy network only once.
"""
from __future__ import annotations

import dataclasses
import logging
from pathlib import Path

import numpy as np

from .cleaner import Gmm1d, clean_and_continue
from .cli import load_datasets, write_rows
from .ensemble import noise_covariance_spectrum
from .mathcore import PrngState
from .trainer import CSV_COLUMNS, STREAM_SPECTRUM, extract_timescales, train, two_phase_boundary

log = logging.getLogger(__name__)

# clean labels, small net; fast enough to probe every other epoch
FIG1_RECIPE = dict(rho=0.0, layer_sizes=(784, 30, 30, 10), alpha=0.05, batch=50, epochs=150,
                   probe_every=2, probe_M=200, checkpoint_every=5, split_probes=False)
FIG2_EPOCHS = (5, 150)  # fast-learning and exploration phase

NOISY_RECIPE = dict(rho=0.2, layer_sizes=(784, 50, 50, 10), alpha=0.01, batch=25, epochs=400,
                    probe_every=5, probe_M=200, checkpoint_every=10)
SWEEP_RHOS = (0.2, 0.4, 0.6)

CLEAN_RECIPE = dict(rho=0.5, layer_sizes=(784, 50, 50, 10), alpha=0.01, batch=25, epochs=200,
                    snapshot_every=2, clean_mode="clean_continue")
CLEAN_RHOS = (0.2, 0.5, 0.8)

SPECTRUM_M = 1000
HIST_BINS = 60


def recipe(base, overrides: dict):
    """``base`` with the recipe's experiment settings (data paths, seed, n_jobs kept)."""
    return dataclasses.replace(base, **overrides)


def _write(path: Path, header, rows) -> Path:
    write_rows(path, header, rows)
    return path


def _gnuplot(path: Path, title: str, body: str) -> Path:
    path.write_text("set datafile separator ','\nset key autotitle columnhead\n"
                    f"set title '{title}'\n{body.strip()}\n")
    return path


def phase_epochs(trajectory, checkpoints) -> dict:
    """Representative checkpoint epochs for the four label-noise phases."""
    ts = extract_timescales(trajectory)
    saved = np.array(sorted(checkpoints))

    def near(e):
        return int(saved[np.argmin(np.abs(saved - e))])

    eps_w = np.array([r.eps_w for r in trajectory])
    half = np.flatnonzero(eps_w <= 0.5)
    t3 = trajectory[half[0]].epoch if len(half) else trajectory[-1].epoch
    return {"I": near(max(1, ts.t_m // 2)), "II": near(2 * ts.t_m), "III": near(t3),
            "IV": int(saved[-1])}


class FigureRunner:
    def __init__(self, base, out: Path):
        self.base = base
        self.out = Path(out)
        self._cache = {}

    # cached experiments --------------------------------------------------------
    def _run(self, key, cfg):
        if key not in self._cache:
            noisy, test = load_datasets(cfg)
            log.info("training %s (%d epochs)", key, cfg.epochs)
            self._cache[key] = (train(cfg.train_config(), cfg.model_config(), noisy, test), noisy)
        return self._cache[key]

    def fig1_run(self):
        return self._run("fig1", recipe(self.base, FIG1_RECIPE))

    def noisy_run(self, rho: float = NOISY_RECIPE["rho"]):
        overrides = dict(NOISY_RECIPE, rho=rho)
        if rho != NOISY_RECIPE["rho"]:
            overrides.update(probe_every=0, checkpoint_every=0)
        return self._run(("noisy", rho), recipe(self.base, overrides))

    def spectrum(self, cfg, w, noisy, epoch):
        return noise_covariance_spectrum(w, noisy, cfg.batch, SPECTRUM_M, cfg.spectrum_layer,
                                         cfg.spectrum_coverage,
                                         PrngState(cfg.seed, STREAM_SPECTRUM).spawn(epoch),
                                         n_jobs=cfg.n_jobs)

    def cleaning(self, rho: float):
        key = ("clean", rho)
        if key not in self._cache:
            cfg = recipe(self.base, dict(CLEAN_RECIPE, rho=rho))
            noisy, test = load_datasets(cfg)
            log.info("cleaning experiment rho=%g", rho)
            self._cache[key] = clean_and_continue(cfg.train_config(), cfg.model_config(), noisy,
                                                  test, cfg.clean_mode, cfg.cleaner_config())
        return self._cache[key]

    # figures ----------------------------------------------------------------------
    def make(self, name: str) -> list:
        return getattr(self, name)()

    def fig1(self):
        result, _ = self.fig1_run()
        rows = [[r.as_dict()[c] for c in CSV_COLUMNS] for r in result.trajectory]
        csv = _write(self.out / "fig1_metrics.csv", CSV_COLUMNS, rows)
        boundary = two_phase_boundary(result.trajectory)
        mark = f"set arrow from {boundary}, graph 0 to {boundary}, graph 1 nohead dt 2\n" if boundary else ""
        gp = _gnuplot(self.out / "fig1.gp", "clean labels: two phases", f"""
{mark}set logscale y
set multiplot layout 2,1
plot 'fig1_metrics.csv' using 'epoch':'L' with lines, '' using 'epoch':'eps_tr' with lines, \\
     '' using 'epoch':'eps_te' with lines
unset logscale y
plot 'fig1_metrics.csv' using 'epoch':'R' with linespoints, '' using 'epoch':'A' axes x1y2 with linespoints
unset multiplot""")
        return [csv, gp]

    def fig2(self):
        result, noisy = self.fig1_run()
        cfg = recipe(self.base, FIG1_RECIPE)
        rows = []
        for phase, epoch in zip(("fast", "exploration"), FIG2_EPOCHS):
            spec = self.spectrum(cfg, result.checkpoints[epoch], noisy, epoch)
            log.info("fig2 %s epoch %d: D_s=%d of %d", phase, epoch, spec.D_s, len(spec.eigenvalues))
            rows += [[phase, epoch, spec.D_s, *row] for row in spec.rows()]
        csv = _write(self.out / "fig2_spectrum.csv",
                     ("phase", "epoch", "D_s", "rank", "eigenvalue", "cum_fraction"), rows)
        gp = _gnuplot(self.out / "fig2.gp", "noise spectrum, clean labels", """
set logscale xy
plot for [p in "fast exploration"] 'fig2_spectrum.csv' using \\
     (strcol('phase') eq p ? column('rank') : 1/0):'eigenvalue' with lines title p""")
        return [csv, gp]

    def fig3(self):
        result, _ = self.noisy_run()
        rows = [[r.as_dict()[c] for c in CSV_COLUMNS] for r in result.trajectory]
        paths = [_write(self.out / "fig3_metrics.csv", CSV_COLUMNS, rows)]
        curves, sweep = [], []
        for rho in SWEEP_RHOS:
            res, _ = self.noisy_run(rho)
            ts = extract_timescales(res.trajectory)
            sweep.append([rho, ts.t_m, ts.t_f, ts.eps_m, ts.eps_f])
            curves += [[rho, r.epoch, r.eps_te, r.L] for r in res.trajectory]
        paths.append(_write(self.out / "fig3_sweep.csv", ("rho", "t_m", "t_f", "eps_m", "eps_f"), sweep))
        paths.append(_write(self.out / "fig3_curves.csv", ("rho", "epoch", "eps_te", "L"), curves))
        paths.append(_gnuplot(self.out / "fig3.gp", "label noise: four phases", """
set multiplot layout 2,2
plot 'fig3_metrics.csv' using 'epoch':'eps_te' w l, '' u 'epoch':'eps_c' w l, '' u 'epoch':'eps_w' w l
plot for [r in "0.2 0.4 0.6"] 'fig3_curves.csv' using \\
     (strcol('rho')+0 == r+0 ? column('epoch') : 1/0):'eps_te' w l title 'rho='.r
plot 'fig3_sweep.csv' using 'rho':'t_m' w lp, '' using 'rho':'t_f' w lp
plot 'fig3_sweep.csv' using 'rho':'eps_m' w lp, '' using 'rho':'eps_f' w lp
unset multiplot"""))
        return paths

    def fig4(self):
        result, _ = self.noisy_run()
        cols = ("epoch", "A", "A_c", "A_w", "A0", "A0_c", "A0_w", "R_cw", "R_ac", "R_aw")
        rows = []
        for r in result.trajectory:
            if r.order is None or r.split is None:
                continue
            d = r.as_dict()
            rows.append([d[c] for c in cols])
        csv = _write(self.out / "fig4_order.csv", cols, rows)
        gp = _gnuplot(self.out / "fig4.gp", "order parameters with label noise", """
set multiplot layout 3,1
set logscale y
plot 'fig4_order.csv' u 'epoch':'A' w lp, '' u 'epoch':'A_c' w lp, '' u 'epoch':'A_w' w lp
plot 'fig4_order.csv' u 'epoch':'A0' w lp, '' u 'epoch':'A0_c' w lp, '' u 'epoch':'A0_w' w lp
unset logscale y
plot 'fig4_order.csv' u 'epoch':'R_cw' w lp, '' u 'epoch':'R_ac' w lp, '' u 'epoch':'R_aw' w lp, 0 dt 2 notitle
unset multiplot""")
        return [csv, gp]

    def fig5(self):
        result, noisy = self.noisy_run()
        cfg = recipe(self.base, NOISY_RECIPE)
        rows = []
        for phase, epoch in phase_epochs(result.trajectory, result.checkpoints).items():
            spec = self.spectrum(cfg, result.checkpoints[epoch], noisy, epoch)
            log.info("fig5 phase %s epoch %d: D_s=%d of %d", phase, epoch, spec.D_s, len(spec.eigenvalues))
            rows += [[phase, epoch, spec.D_s, *row] for row in spec.rows()]
        csv = _write(self.out / "fig5_spectrum.csv",
                     ("phase", "epoch", "D_s", "rank", "eigenvalue", "cum_fraction"), rows)
        gp = _gnuplot(self.out / "fig5.gp", "noise spectra in the four phases", """
set logscale xy
plot for [p in "I II III IV"] 'fig5_spectrum.csv' using \\
     (strcol('phase') eq p ? column('rank') : 1/0):'eigenvalue' with lines title p""")
        return [csv, gp]

    def fig6(self):
        rep = self.cleaning(CLEAN_RECIPE["rho"])
        mask = None
        noisy, _ = load_datasets(recipe(self.base, CLEAN_RECIPE))
        mask = noisy.corrupt_mask
        paths = []
        # (A) loss histograms of both groups at a few snapshot epochs
        snaps = {s.epoch: s.losses for s in rep.snapshots}
        epochs = sorted({0, rep.t_c, max(snaps) // 2, max(snaps)} & set(snaps))
        hist_rows = []
        for e in epochs:
            edges = np.linspace(0.0, max(snaps[e].max(), 1e-12), HIST_BINS + 1)
            for group, sel in (("c", ~mask), ("w", mask)):
                dens, _ = np.histogram(snaps[e][sel], bins=edges, density=True)
                hist_rows += [[e, group, 0.5 * (a + b), d] for a, b, d in zip(edges[:-1], edges[1:], dens)]
        paths.append(_write(self.out / "fig6_hist.csv", ("epoch", "group", "loss", "density"), hist_rows))
        # (B) mixture fit at t_c
        grid = np.linspace(0.0, snaps[rep.t_c].max(), 200)
        g = Gmm1d(rep.r, rep.m_c, rep.m_w, rep.s_c, rep.s_w, 0.0, 0, True)
        pdf = np.exp(np.logaddexp.reduce(g.component_logpdf(grid), axis=-1))
        paths.append(_write(self.out / "fig6_fit.csv", ("loss", "pdf"), zip(grid.tolist(), pdf.tolist())))
        # (C) fitted means against measured group means
        L = {r.epoch: (r.L_c, r.L_w) for r in rep.trajectory}
        gap_rows = [[e, mc, mw, r, *L.get(e, (None, None))] for e, mc, mw, r in rep.gaps]
        paths.append(_write(self.out / "fig6_gaps.csv", ("epoch", "m_c", "m_w", "r", "L_c", "L_w"), gap_rows))
        # (D) accuracy curves
        acc = {}
        for name in ("a_n", "a_c", "a_p"):
            for e, a in rep.curves[name]:
                acc.setdefault(e, {})[name] = a
        paths.append(_write(self.out / "fig6_accuracy.csv", ("epoch", "a_n", "a_c", "a_p"),
                            [[e, d.get("a_n"), d.get("a_c"), d.get("a_p")] for e, d in sorted(acc.items())]))
        # (E) noise sweep
        sweep = []
        for rho in CLEAN_RHOS:
            r = self.cleaning(rho)
            sweep.append([rho, r.t_c, r.a_n, r.a_c, r.a_p, r.Q, r.precision, r.recall])
        paths.append(_write(self.out / "fig6_sweep.csv",
                            ("rho", "t_c", "a_n", "a_c", "a_p", "Q", "precision", "recall"), sweep))
        paths.append(_gnuplot(self.out / "fig6.gp", "loss-mixture cleaning", f"""
set multiplot layout 2,2
plot for [g in "c w"] 'fig6_hist.csv' using \\
     (column('epoch') == {rep.t_c} && strcol('group') eq g ? column('loss') : 1/0):'density' w boxes title g, \\
     'fig6_fit.csv' using 'loss':'pdf' w l title 'mixture'
plot 'fig6_gaps.csv' u 'epoch':'m_c' w p, '' u 'epoch':'m_w' w p, '' u 'epoch':'L_c' w l, '' u 'epoch':'L_w' w l
plot 'fig6_accuracy.csv' u 'epoch':'a_n' w l, '' u 'epoch':'a_c' w l, '' u 'epoch':'a_p' w l
plot 'fig6_sweep.csv' u 'rho':'a_n' w lp, '' u 'rho':'a_c' w lp, '' u 'rho':'a_p' w lp
unset multiplot"""))
        return paths


FIGURES = {"fig1": FigureRunner.fig1, "fig2": FigureRunner.fig2, "fig3": FigureRunner.fig3,
           "fig4": FigureRunner.fig4, "fig5": FigureRunner.fig5, "fig6": FigureRunner.fig6}
