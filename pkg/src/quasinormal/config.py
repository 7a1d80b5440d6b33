"""Run configuration: an INI-style file of flat ``[section]`` key/value maps.

Every key has a typed default; unknown keys, unparsable values and
out-of-range values raise ConfigError carrying the offending line number.
Precedence is defaults < file < command-line overrides.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError

ARMS = ("direct", "masked", "rpca", "pca0", "pca1", "pca2")


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _list(conv):
    def parse(text):
        items = [t.strip() for t in text.split(",") if t.strip()]
        return tuple(conv(t) for t in items)

    parse.__name__ = f"list[{conv.__name__}]"
    return parse


def _str(text):
    text = text.strip()
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
        text = text[1:-1]
    return text


def _positive(v):
    return (all(x > 0 for x in v) if isinstance(v, tuple) else v > 0) or "must be positive"


def _nonneg(v):
    return (all(x >= 0 for x in v) if isinstance(v, tuple) else v >= 0) or "must be >= 0"


def _choice(*options):
    def check(v):
        return v in options or f"must be one of {', '.join(options)}"

    return check


def _arms(v):
    bad = [a for a in v if a not in ARMS]
    return (bool(v) and not bad) or f"arms must be a nonempty subset of {', '.join(ARMS)}"


def _unit(v):
    return 0.0 <= v <= 1.0 or "must lie in [0, 1]"


def _dims(v):
    return (len(v) in (2, 3) and all(n >= 32 for n in v)) or "must be 2 or 3 sizes, each >= 32"


@dataclass(frozen=True)
class Key:
    conv: object
    default: object
    check: object = None
    doc: str = ""


SCHEMA = {
    "data": {
        "seed": Key(int, 0, _nonneg, "first case seed"),
        "n_cases": Key(int, 10, _positive, "number of synthetic cases (seeds seed..seed+n-1)"),
        "dims": Key(_list(int), (48, 48), _dims, "phantom grid size"),
        "spacing": Key(_list(float), (), None, "mm per axis; empty means 1.0"),
        "max_disp": Key(float, 3.0, _nonneg, "cap on synthetic displacements [mm]"),
        "tumor_contrast": Key(float, 1.0, _nonneg, "tumor contrast scale"),
        "mass_effect": Key(float, 0.4, _nonneg, "peak push as a fraction of tumor radius"),
        "noise": Key(float, 0.01, _nonneg, "Gaussian noise sd added to phantoms"),
        "population": Key(int, 200, _positive, "normal population size"),
        "population_seed": Key(int, 10_000, _nonneg, "seed of the first population image"),
    },
    "basis": {
        "k": Key(int, 0, _nonneg, "PCA modes; 0 uses the preset (150 in 2D, 50 in 3D)"),
        "rescale": Key(_bool, False, None, "rescale each image to [0,1] before PCA"),
        "impute_fallback": Key(_str, "global-mean", _choice("global-mean", "error"), ""),
    },
    "solver": {
        "gamma": Key(float, 3.0, _positive, "fidelity weight"),
        "variant": Key(_str, "rof", _choice("rof", "tvl1"), ""),
        "max_iter": Key(int, 1000, _positive, ""),
        "tol": Key(float, 1e-6, _nonneg, "relative-change stopping threshold"),
        "tau": Key(float, 0.0, _nonneg, "primal step; 0 means 1/L"),
        "sigma": Key(float, 0.0, _nonneg, "dual step; 0 means 1/L"),
        "theta": Key(float, 1.0, _unit, "over-relaxation"),
        "warm_start": Key(_bool, False, None, "warm-start regularization steps"),
    },
    "registration": {
        "levels": Key(int, 3, _positive, "pyramid depth"),
        "iters_per_level": Key(int, 100, _nonneg, ""),
        "smoothing_sigma": Key(float, 2.0, _nonneg, "field smoothing [mm]"),
        "similarity": Key(_str, "ncc", _choice("ncc", "ssd"), ""),
        "step": Key(float, 1.0, _positive, "update scale"),
        "alternations": Key(int, 6, _positive, "register/decompose rounds"),
    },
    "evaluate": {
        "arms": Key(_list(_str), ARMS, _arms, "method arms to run"),
        "near_mm": Key(float, 10.0, _positive, "near/far split [mm]"),
        "reference": Key(_str, "registered", _choice("registered", "generated"),
                         "registration of the atlas to the tumor-free image, or the synthetic field"),
        "lambda": Key(float, 0.0, _nonneg, "RPCA sparsity weight; 0 means 1/sqrt(max(m, n))"),
        "rpca_population": Key(int, 50, _positive, "normal images stacked with the case for RPCA"),
        "folds": Key(int, 10, lambda v: v >= 2 or "must be >= 2", ""),
        "gamma_grid": Key(_list(float), (0.5, 1.0, 1.5, 2.0, 2.5, 3.0), _positive, ""),
        "crossval_arm": Key(_str, "pca1", _choice("pca0", "pca1", "pca2"), ""),
    },
    "external": {
        "command_template": Key(_str, "", None, "external registrar; {moving} {fixed} {out}"),
    },
}


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


class RunConfig:
    def __init__(self, sections=None):
        self.sections = {s: {k: key.default for k, key in keys.items()}
                         for s, keys in SCHEMA.items()}
        for s, values in (sections or {}).items():
            for k, v in values.items():
                self.set(s, k, v)

    def __getitem__(self, section):
        return self.sections[section]

    def set(self, section, key, value, line=None):
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]", line)
        spec = SCHEMA[section].get(key)
        if spec is None:
            raise ConfigError(f"unknown key {key!r} in [{section}]", line, key)
        if isinstance(value, str):
            try:
                value = spec.conv(value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"[{section}] {key}: cannot parse ({exc})", line, key) from None
        if isinstance(value, float) and not math.isfinite(value):
            raise ConfigError(f"[{section}] {key}: must be finite", line, key)
        if spec.check is not None:
            ok = spec.check(value)
            if ok is not True:
                raise ConfigError(f"[{section}] {key} = {_format(value)}: {ok}", line, key)
        self.sections[section][key] = value

    def to_text(self):
        out = []
        for s, keys in SCHEMA.items():
            out.append(f"[{s}]")
            for k in keys:
                out.append(f"{k} = {_format(self.sections[s][k])}")
            out.append("")
        return "\n".join(out)

    # -- typed views -------------------------------------------------------

    def seeds(self):
        d = self["data"]
        return list(range(d["seed"], d["seed"] + d["n_cases"]))

    def phantom_spec(self):
        from .synth import PhantomSpec

        d = self["data"]
        dims = tuple(d["dims"])
        spacing = tuple(d["spacing"]) or (1.0,) * len(dims)
        if len(spacing) != len(dims):
            raise ConfigError("[data] spacing must have one entry per dimension", key="spacing")
        return PhantomSpec(
            dims=dims, spacing=spacing, max_disp=d["max_disp"],
            tumor_contrast=d["tumor_contrast"], mass_effect=d["mass_effect"],
            noise=d["noise"],
        )

    def solver_params(self):
        from .decomp import SolverParams

        s = self["solver"]
        return SolverParams(
            max_iter=s["max_iter"], tol=s["tol"], tau=s["tau"] or None,
            sigma=s["sigma"] or None, theta=s["theta"], warm_start=s["warm_start"],
        )

    def reg_params(self, mask=None):
        from .registration import RegParams

        r = self["registration"]
        return RegParams(
            levels=r["levels"], iters_per_level=r["iters_per_level"],
            smoothing_sigma=r["smoothing_sigma"], similarity=r["similarity"],
            step=r["step"], mask=mask,
        )

    def modes(self, ndim, n_images):
        from .pca import DEFAULT_MODES

        k = self["basis"]["k"] or DEFAULT_MODES[ndim]
        return min(k, n_images - 1)


def parse_text(text, config=None):
    config = config or RunConfig()
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"malformed section header {line!r}", lineno)
            section = line[1:-1].strip()
            if section not in SCHEMA:
                raise ConfigError(f"unknown section [{section}]", lineno)
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"expected 'key = value', got {line!r}", lineno)
        if section is None:
            raise ConfigError("key outside any section", lineno, key.strip())
        value = value.split(" #")[0]
        config.set(section, key.strip(), value, lineno)
    return config


def parse_config(path=None, overrides=()) -> RunConfig:
    """Defaults, then the file at ``path`` (if any), then ``section.key=value`` overrides."""
    config = RunConfig()
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read {path}: {exc}") from None
        parse_text(text, config)
    for item in overrides:
        name, sep, value = item.partition("=")
        section, dot, key = name.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} is not section.key=value")
        config.set(section, key, value)
    return config
