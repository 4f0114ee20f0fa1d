"""Run configuration: a sectioned INI file plus command-line overrides.

Sections::

    [run]     scenario, n_traj, dt, t_max, seed, threads, init, scheme,
              epsilons, times, t_slices
    [params]  preset keyword arguments (e.g. gamma0, kappa) or ``mu`` for iid
    [model0]  custom scenario only: A, b, C, D, Gamma as JSON lists
    [model1]
    [test]    mode (strong | weak | direct) and its targets

Unknown sections or keys are rejected with the offending name in the message.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
import inspect
import io
import json
import math

from .errors import ConfigError, ModelError
from .model import PRESETS, GaussianModel, HypothesisPair
from .montecarlo import DEFAULT_DT
from .testing import SprtConfig

SCENARIOS = tuple(PRESETS) + ("iid", "custom")

RUN_KEYS = {
    "scenario": str, "n_traj": int, "dt": float, "t_max": float, "seed": int, "threads": int,
    "init": str, "scheme": str, "epsilons": "floats", "times": "floats", "t_slices": "floats",
    "nu_budget": int, "t_fit": float,
}
TEST_KEYS = {"mode": str, "epsilon": float, "epsilon1": float, "pi0": float,
             "alpha0": float, "alpha1": float, "a0": float, "a1": float}
MODEL_KEYS = ("A", "b", "C", "D", "Gamma")

RUN_DEFAULTS = {"scenario": "damping", "n_traj": 4000, "seed": 0, "threads": None, "init": "steady_state",
                "scheme": "auto"}


def _preset_keys(scenario: str) -> dict:
    if scenario == "iid":
        return {"mu": 0.5}
    if scenario not in PRESETS:
        return {}
    sig = inspect.signature(PRESETS[scenario])
    return {k: p.default for k, p in sig.parameters.items() if k != "priors"}


def parse_floats(text: str) -> list:
    """``"a,b,c"``, a JSON list, or ``"start:stop:num"`` (inclusive linspace)."""
    text = str(text).strip()
    if not text:
        return []
    if text.startswith("["):
        vals = json.loads(text)
        return [float(v) for v in vals]
    if text.count(":") == 2 and "," not in text:
        start, stop, num = text.split(":")
        n = int(num)
        if n < 1:
            raise ValueError("num must be >= 1")
        a, b = float(start), float(stop)
        return [a + (b - a) * i / (n - 1) for i in range(n)] if n > 1 else [a]
    return [float(v) for v in text.split(",") if v.strip()]


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ",".join(_fmt(float(x)) for x in v)
    return str(v)


def _coerce(kind, raw, where):
    try:
        if kind == "floats":
            return parse_floats(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return str(raw).strip()
    except (ValueError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r} ({exc})") from None


@dataclass
class RunConfig:
    run: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    models: dict = field(default_factory=dict)
    test: dict = field(default_factory=dict)

    # -- construction -------------------------------------------------------

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "RunConfig":
        cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";",))
        cp.optionxform = str
        try:
            cp.read_string(text, source=source)
        except configparser.Error as exc:
            raise ConfigError(f"{source}: {exc}") from None
        cfg = cls()
        for section in cp.sections():
            items = dict(cp.items(section))
            if section == "run":
                for k, v in items.items():
                    if k not in RUN_KEYS:
                        raise ConfigError(f"{source}: [run] unknown key {k!r}")
                    cfg.run[k] = _coerce(RUN_KEYS[k], v, f"{source}: [run] {k}")
            elif section == "params":
                for k, v in items.items():
                    cfg.params[k] = _coerce(float, v, f"{source}: [params] {k}")
            elif section in ("model0", "model1"):
                d = {}
                for k, v in items.items():
                    if k not in MODEL_KEYS:
                        raise ConfigError(f"{source}: [{section}] unknown key {k!r}")
                    try:
                        d[k] = json.loads(v)
                    except json.JSONDecodeError as exc:
                        raise ConfigError(f"{source}: [{section}] {k}: invalid JSON ({exc})") from None
                cfg.models[section] = d
            elif section == "test":
                for k, v in items.items():
                    if k not in TEST_KEYS:
                        raise ConfigError(f"{source}: [test] unknown key {k!r}")
                    cfg.test[k] = _coerce(TEST_KEYS[k], v, f"{source}: [test] {k}")
            else:
                raise ConfigError(f"{source}: unknown section [{section}]")
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_text(text, str(path))

    # -- checks and resolution ------------------------------------------------

    @property
    def scenario(self) -> str:
        return self.run.get("scenario", RUN_DEFAULTS["scenario"])

    def validate(self) -> None:
        sc = self.scenario
        if sc not in SCENARIOS:
            raise ConfigError(f"[run] scenario must be one of {', '.join(SCENARIOS)}, got {sc!r}")
        allowed = _preset_keys(sc)
        for k in self.params:
            if k == "pi0":
                continue
            if k not in allowed:
                raise ConfigError(f"[params] unknown key {k!r} for scenario {sc!r}")
        if sc == "custom":
            for s in ("model0", "model1"):
                if s not in self.models:
                    raise ConfigError(f"custom scenario needs a [{s}] section")
                for k in ("A", "C", "D"):
                    if k not in self.models[s]:
                        raise ConfigError(f"[{s}] missing {k}")
        elif self.models:
            raise ConfigError("[model0]/[model1] are only valid with scenario = custom")
        mode = self.test.get("mode")
        if mode is not None and mode not in ("strong", "weak", "direct"):
            raise ConfigError(f"[test] mode must be strong, weak or direct, got {mode!r}")
        for k in ("n_traj", "threads"):
            v = self.run.get(k)
            if v is not None and v <= 0:
                raise ConfigError(f"[run] {k} must be positive")
        for k in ("dt", "t_max", "t_fit"):
            v = self.run.get(k)
            if v is not None and not (math.isfinite(v) and v > 0):
                raise ConfigError(f"[run] {k} must be positive and finite")

    def priors(self):
        pi0 = float(self.params.get("pi0", self.test.get("pi0", 0.5)))
        return (pi0, 1.0 - pi0)

    def pair(self) -> HypothesisPair:
        sc = self.scenario
        if sc == "iid":
            raise ConfigError("the iid scenario has no filter models")
        try:
            if sc == "custom":
                return HypothesisPair(GaussianModel.from_dict(self.models["model0"]),
                                      GaussianModel.from_dict(self.models["model1"]), self.priors())
            kwargs = {k: v for k, v in self.params.items() if k != "pi0"}
            return PRESETS[sc](priors=self.priors(), **kwargs)
        except ModelError:
            raise
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"cannot build scenario {sc!r}: {exc}") from None

    def sprt_config(self) -> SprtConfig:
        t = self.test
        mode = t.get("mode", "weak" if ("alpha0" in t or "alpha1" in t) else "strong")
        if mode == "strong":
            eps = t.get("epsilon", 0.01)
            return SprtConfig.strong(eps, t.get("epsilon1", eps), self.priors()[0])
        if mode == "weak":
            a0 = t.get("alpha0", t.get("alpha1", 0.01))
            return SprtConfig.weak(a0, t.get("alpha1", a0))
        if "a0" not in t or "a1" not in t:
            raise ConfigError("[test] direct mode needs a0 and a1")
        return SprtConfig.direct(t["a0"], t["a1"])

    def get(self, key, default=None):
        if key in self.run and self.run[key] is not None:
            return self.run[key]
        if key == "dt":
            return DEFAULT_DT.get(self.scenario, 1e-4)
        return RUN_DEFAULTS.get(key, default)

    # -- overrides and serialisation --------------------------------------------

    def override(self, section: str, key: str, value) -> None:
        if value is None:
            return
        getattr(self, section)[key] = value

    def resolved(self) -> dict:
        """Every effective setting, as nested plain values."""
        run = {k: self.get(k) for k in ("scenario", "n_traj", "dt", "seed", "init", "scheme")}
        for k in ("t_max", "threads", "epsilons", "times", "t_slices", "nu_budget", "t_fit"):
            if self.run.get(k) is not None:
                run[k] = self.run[k]
        params = dict(_preset_keys(self.scenario))
        params.update(self.params)
        out = {"run": run, "params": params, "test": dict(self.test)}
        for s, d in self.models.items():
            out[s] = d
        return out

    def to_ini(self) -> str:
        res = self.resolved()
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        for section in ("run", "params", "model0", "model1", "test"):
            if section not in res:
                continue
            cp.add_section(section)
            for k, v in res[section].items():
                if v is None:
                    continue
                cp.set(section, k, json.dumps(v) if section.startswith("model") else _fmt(v))
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue().strip() + "\n"
