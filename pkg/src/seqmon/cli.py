"""``seqmon`` command line.

Subcommands: predict, sprt-run, seq-sweep, det-sweep, hist, iid, filter.
Exit status: 0 success, 2 bad configuration or model, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import tempfile

import numpy as np

from . import analytics, montecarlo
from .config import SCENARIOS, RunConfig, parse_floats
from .errors import ConfigError, ModelError, NumericalError
from .solvers import riccati_steady_state, stationary_stats, with_steady_state
from .model import build_extended
from .testing import SprtConfig
from .trajectory import InitPolicy, filter_from_record, load_record

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

DEFAULT_EPS = [0.1, 0.05, 0.02, 0.01, 0.005, 0.002, 0.001]


# ---------------------------------------------------------------------------
# output helpers


def _num(x):
    """JSON-safe float (repr round-trips; non-finite become null)."""
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else None
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.ndarray):
        return [_num(v) for v in x.tolist()]
    if isinstance(x, (list, tuple)):
        return [_num(v) for v in x]
    if isinstance(x, dict):
        return {str(k): _num(v) for k, v in x.items()}
    return x


def _csv_cell(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def render(payload: dict, rows: list | None, columns: list | None, fmt: str, config: RunConfig) -> str:
    if fmt == "json":
        doc = {"config": config.resolved(), **payload}
        return json.dumps(_num(doc), indent=2, sort_keys=False) + "\n"
    if rows is None:
        raise ConfigError("this subcommand only supports --format json")
    buf = io.StringIO()
    for line in config.to_ini().splitlines():
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_csv_cell(r[c]) for c in columns])
    return buf.getvalue()


def write_atomic(text: str, path: str | None) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
        return
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".seqmon-", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_config_block(text: str) -> RunConfig:
    """Recover the configuration embedded in a CSV or JSON output."""
    s = text.lstrip()
    if s.startswith("{"):
        res = json.loads(s)["config"]
        cfg = RunConfig(run=dict(res["run"]), params=dict(res["params"]), test=dict(res["test"]),
                        models={k: v for k, v in res.items() if k.startswith("model")})
        cfg.validate()
        return cfg
    lines = [ln[2:] for ln in text.splitlines() if ln.startswith("# ")]
    return RunConfig.from_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# commands


def _threads(cfg):
    t = cfg.run.get("threads")
    return t if t else montecarlo.default_threads()


def _t_max(cfg, pair, a0, a1):
    if cfg.run.get("t_max"):
        return cfg.run["t_max"]
    mu = analytics.asymptotic_drift(pair)
    return 20 * max(analytics.mean_stopping_time(mu, a0, a1))


def cmd_predict(cfg: RunConfig):
    pair = cfg.pair()
    mu = analytics.asymptotic_drift(pair)
    eps_list = cfg.run.get("epsilons") or DEFAULT_EPS
    out = {"mu0": mu[0], "mu1": mu[1], "warnings": []}
    out["sigma_ss"] = [riccati_steady_state(m).tolist() for m in pair.models()]
    if pair.identical or min(mu) <= 0:
        out["warnings"].append("models are indistinguishable: zero LLR drift")
        return out, None, None
    stats = {}
    for k in (0, 1):
        st = stationary_stats(with_steady_state(build_extended(pair, k)))
        stats[f"h{k}"] = {"d": st.d.tolist(), "W": st.W.tolist()}
    out["stationary"] = stats
    nu = None
    if cfg.run.get("nu_budget"):
        t_fit = cfg.run.get("t_fit") or 4 * max(analytics.mean_stopping_time(mu, 4.6, 4.6))
        nu = tuple(analytics.variance_rate(pair, k, t_fit, cfg.run["nu_budget"], cfg.get("seed"), cfg.get("dt"))[0]
                   for k in (0, 1))
        out["nu0"], out["nu1"] = nu
        c = analytics.gaussian_llr_consistency(mu[0], mu[1], nu[0], nu[1])
        out["gaussian_llr_consistent"] = c.consistent
        out["gaussian_llr_details"] = c.details
    rows = []
    for e in eps_list:
        cfg_e = SprtConfig.strong(e, e, pair.priors[0])
        t0, t1 = analytics.mean_stopping_time(mu, cfg_e.a0, cfg_e.a1)
        ig = analytics.ig_params(mu, nu or (2 * mu[0], 2 * mu[1]), cfg_e.a0, cfg_e.a1)
        rows.append({"epsilon": e, "a0": cfg_e.a0, "a1": cfg_e.a1, "mean_tau0": t0, "mean_tau1": t1,
                     "ig_h0": list(ig[0]), "ig_h1": list(ig[1])})
    out["mean_tau"] = rows
    if cfg.scenario == "damping":
        p = {k: cfg.params[k] for k in ("gamma0", "gamma1", "kappa", "eta", "nbar") if k in cfg.params}
        cf = analytics.damping_closed_forms(**p)
        out["closed_forms"] = {"sigma0": cf.sigma0, "sigma1": cf.sigma1, "mu0": cf.mu0, "mu1": cf.mu1,
                               "mu1_rel_diff": abs(cf.mu1 - mu[1]) / mu[1]}
    cols = ["epsilon", "a0", "a1", "mean_tau0", "mean_tau1"]
    return out, rows, cols


def cmd_sprt_run(cfg: RunConfig):
    pair = cfg.pair()
    sc = cfg.sprt_config()
    tm = _t_max(cfg, pair, sc.a0, sc.a1)
    st = montecarlo.run_sprt_ensemble(pair, sc, cfg.get("n_traj"), cfg.get("dt"), tm, cfg.get("seed"),
                                      _threads(cfg), cfg.get("init"), cfg.get("scheme"))
    d = st.to_dict()
    d["t_max"] = tm
    rows = [{"hypothesis": k, "n": st.n_per_hypothesis, "n_undecided": st.n_undecided[k],
             "n_failed": st.n_failed[k], "tau_mean": st.tau_mean[k], "tau_sem": st.tau_sem[k],
             "err_point": e.point, "err_ci_lo": e.ci_lo, "err_ci_hi": e.ci_hi}
            for k, e in ((0, st.alpha1), (1, st.alpha0)) if e is not None]
    cols = ["hypothesis", "n", "n_undecided", "n_failed", "tau_mean", "tau_sem", "err_point", "err_ci_lo", "err_ci_hi"]
    return {"ensemble": d}, rows, cols


def cmd_seq_sweep(cfg: RunConfig):
    pair = cfg.pair()
    eps = cfg.run.get("epsilons") or DEFAULT_EPS
    pts = montecarlo.sequential_sweep(pair, eps, cfg.get("n_traj"), cfg.get("dt"), cfg.get("seed"),
                                      cfg.run.get("t_max"), _threads(cfg), cfg.get("init"), cfg.get("scheme"))
    rows = [{"epsilon": p.extra["epsilon"], "a": p.extra["a"], "n": p.extra["n"],
             "n_undecided": p.extra["n_undecided"], "tau_mean": p.time, "tau_sem": p.extra["tau_sem"],
             "err_point": p.error.point, "err_ci_lo": p.error.ci_lo, "err_ci_hi": p.error.ci_hi} for p in pts]
    cols = ["epsilon", "a", "n", "n_undecided", "tau_mean", "tau_sem", "err_point", "err_ci_lo", "err_ci_hi"]
    return {"points": rows}, rows, cols


def _default_times(pair):
    mu = analytics.asymptotic_drift(pair)
    t_end = 3 * max(analytics.mean_stopping_time(mu, math.log(999), math.log(999)))
    return list(np.linspace(0.0, t_end, 61))


def cmd_det_sweep(cfg: RunConfig):
    pair = cfg.pair()
    times = cfg.run.get("times") or _default_times(pair)
    pts = montecarlo.deterministic_sweep(pair, times, cfg.get("n_traj"), cfg.get("dt"), cfg.get("seed"),
                                         _threads(cfg), 0.0, cfg.get("init"), cfg.get("scheme"))
    rows = [{"t": p.time, "n": p.extra["n"], "err_point": p.error.point, "err_ci_lo": p.error.ci_lo,
             "err_ci_hi": p.error.ci_hi,
             "neg_log_err": -math.log(p.error.point) if p.error.point > 0 else float("inf")} for p in pts]
    cols = ["t", "n", "err_point", "err_ci_lo", "err_ci_hi"]
    return {"points": rows, "correlated_slices": True}, rows, cols


def cmd_hist(cfg: RunConfig):
    pair = cfg.pair()
    sc = cfg.sprt_config()
    tm = _t_max(cfg, pair, sc.a0, sc.a1)
    st = montecarlo.run_sprt_ensemble(pair, sc, cfg.get("n_traj"), cfg.get("dt"), tm, cfg.get("seed"),
                                      _threads(cfg), cfg.get("init"), cfg.get("scheme"))
    mu = analytics.asymptotic_drift(pair)
    budget = cfg.run.get("nu_budget") or 1000
    t_fit = cfg.run.get("t_fit") or 4 * max(analytics.mean_stopping_time(mu, sc.a0, sc.a1))
    out, rows = {}, []
    for k, a in ((0, sc.a0), (1, sc.a1)):
        nu, nu_se = analytics.variance_rate(pair, k, t_fit, budget, cfg.get("seed") + 1, cfg.get("dt"))
        hist, ks = montecarlo.stopping_histogram(st.decided_tau(k), (mu[k], nu, a))
        out[f"h{k}"] = {"mu": mu[k], "nu": nu, "nu_se": nu_se, "a": a, "ks": ks,
                        "bin_edges": hist.bin_edges.tolist(), "density": hist.density.tolist()}
        for lo, hi, dens, cnt in zip(hist.bin_edges[:-1], hist.bin_edges[1:], hist.density, hist.counts):
            rows.append({"hypothesis": k, "bin_lo": float(lo), "bin_hi": float(hi), "density": float(dens),
                         "count": int(cnt)})
    return out, rows, ["hypothesis", "bin_lo", "bin_hi", "density", "count"]


def cmd_iid(cfg: RunConfig):
    mu = float(cfg.params.get("mu", 0.5))
    spec = analytics.IidGaussianSpec.from_mu(mu)
    eps = cfg.run.get("epsilons") or DEFAULT_EPS
    rows = []
    for e in eps:
        s = analytics.iid_summary(spec, e)
        rows.append({"epsilon": e, "neg_log_eps": -math.log(e), "mean_tau_pred": s["mean_tau_asymptotic"],
                     "T_det_pred": s["T_det_asymptotic"], "ratio": s["ratio_asymptotic"],
                     "mean_tau_wald": s["mean_tau_wald"], "T_det_exact": s["T_det_exact"],
                     "ratio_exact": s["ratio_exact"]})
    reg = analytics.iid_rate_regions(mu)
    payload = {"mu": mu, "nu": spec.nu, "R_sym": mu / 4, "stein": [mu, mu], "table": rows,
               "rate_regions": {"xi": reg["xi"].tolist(), "det_R0": reg["det_R0"].tolist(),
                                "det_R1": reg["det_R1"].tolist(), "seq_corner": list(reg["seq_corner"])}}
    cols = ["epsilon", "neg_log_eps", "mean_tau_pred", "T_det_pred", "ratio", "mean_tau_wald", "T_det_exact",
            "ratio_exact"]
    return payload, rows, cols


def cmd_filter(cfg: RunConfig, record_path: str):
    pair = cfg.pair()
    dy, dt = load_record(record_path)
    ell = filter_from_record(pair, dy, dt, InitPolicy(cfg.get("init")))
    sc = cfg.sprt_config()
    t = np.arange(ell.size) * dt
    out_idx = np.nonzero((ell >= sc.a1) | (ell <= -sc.a0))[0]
    if out_idx.size:
        i = int(out_idx[0])
        decision = {"decision": int(ell[i] >= sc.a1), "tau": float(t[i])}
    else:
        decision = {"decision": None, "tau": None}
    rows = [{"t": float(a), "ell": float(b)} for a, b in zip(t, ell)]
    return {"dt": dt, "n": int(dy.shape[0]), "sprt": decision, "final_ell": float(ell[-1])}, rows, ["t", "ell"]


COMMANDS = {
    "predict": cmd_predict, "sprt-run": cmd_sprt_run, "seq-sweep": cmd_seq_sweep,
    "det-sweep": cmd_det_sweep, "hist": cmd_hist, "iid": cmd_iid,
}


# ---------------------------------------------------------------------------
# argument handling


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI configuration file")
    common.add_argument("--scenario", choices=SCENARIOS)
    common.add_argument("--epsilon", help="strong-mode target, or a comma list for sweeps")
    common.add_argument("--alpha0", type=float, help="weak-mode target for deciding 0 under h1")
    common.add_argument("--alpha1", type=float, help="weak-mode target for deciding 1 under h0")
    common.add_argument("--n-traj", type=int)
    common.add_argument("--dt", type=float)
    common.add_argument("--t-max", type=float)
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int)
    common.add_argument("--times", help="det-sweep times: comma list or start:stop:num")
    common.add_argument("--init", choices=[p.value for p in InitPolicy])
    common.add_argument("--scheme", choices=["auto", "expeuler", "euler", "gaussian"])
    common.add_argument("--param", action="append", default=[], metavar="KEY=VALUE",
                        help="scenario parameter override (repeatable)")
    common.add_argument("--out", help="output path (default stdout)")
    common.add_argument("--format", choices=["csv", "json"], default=None)

    p = argparse.ArgumentParser(prog="seqmon", description="Sequential hypothesis testing for monitored Gaussian systems.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (("predict", "analytic drifts, stopping times and stopping-law parameters"),
                        ("sprt-run", "one SPRT ensemble"),
                        ("seq-sweep", "SPRT mean time and error across epsilons"),
                        ("det-sweep", "fixed-horizon error across times"),
                        ("hist", "stopping-time histograms with KS distance to the inverse Gaussian"),
                        ("iid", "IID Gaussian predictions and rate regions")):
        sub.add_parser(name, parents=[common], help=help_)
    f = sub.add_parser("filter", parents=[common], help="filter a measured record (t, dy...)")
    f.add_argument("record", help="CSV or .npy file with columns t, dy_1..dy_m")
    return p


def _apply_flags(cfg: RunConfig, args) -> None:
    if args.scenario:
        cfg.run["scenario"] = args.scenario
    for key in ("n_traj", "dt", "t_max", "seed", "threads", "init", "scheme"):
        v = getattr(args, key)
        if v is not None:
            cfg.run[key] = v
    if args.times:
        cfg.run["times"] = parse_floats(args.times)
    if args.epsilon:
        vals = parse_floats(args.epsilon)
        if len(vals) == 1 and args.command not in ("seq-sweep", "predict", "iid"):
            cfg.test.update(mode="strong", epsilon=vals[0])
            cfg.test.pop("epsilon1", None)
        else:
            cfg.run["epsilons"] = vals
            cfg.test.setdefault("epsilon", vals[-1])
    if args.alpha0 is not None or args.alpha1 is not None:
        cfg.test["mode"] = "weak"
        if args.alpha0 is not None:
            cfg.test["alpha0"] = args.alpha0
        if args.alpha1 is not None:
            cfg.test["alpha1"] = args.alpha1
    for item in args.param:
        if "=" not in item:
            raise ConfigError(f"--param expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        try:
            cfg.params[k.strip()] = float(v)
        except ValueError:
            raise ConfigError(f"--param {k}: not a number: {v!r}") from None
    if cfg.run.get("threads") is None and os.environ.get("SEQMON_THREADS"):
        cfg.run["threads"] = montecarlo.default_threads()


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
        _apply_flags(cfg, args)
        if args.command == "iid":
            cfg.run.setdefault("scenario", "iid")
            if cfg.scenario != "iid":
                raise ConfigError("the iid subcommand needs scenario = iid")
        cfg.validate()
        fmt = args.format or ("json" if args.command in ("predict",) else "csv")
        if args.command == "filter":
            payload, rows, cols = cmd_filter(cfg, args.record)
        else:
            payload, rows, cols = COMMANDS[args.command](cfg)
        write_atomic(render(payload, rows, cols, fmt, cfg), args.out)
    except ModelError as exc:
        print(f"seqmon: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"seqmon: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"seqmon: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
