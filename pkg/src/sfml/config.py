"""Strict INI-style run configuration.

Sections ``[sde]``, ``[train]``, ``[eval]`` and ``[output]``. Unknown
sections or keys are errors reported with their line number. Vectors are
comma separated; matrices separate rows with ``;``.

Seeds: ``[sde] seed`` is the run seed. Unless set explicitly,
``[train] seed`` and ``[eval] seed`` are derived from it as
``SeedSequence([seed, 1])`` and ``SeedSequence([seed, 2])``.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import re

import numpy as np

from sfml import sde as sde_mod


class ConfigError(ValueError):
    def __init__(self, message, line=None):
        super().__init__(f"line {line}: {message}" if line else message)
        self.line = line


def _vec(s):
    return tuple(float(v) for v in s.split(",") if v.strip())


def _ints(s):
    return tuple(int(v) for v in s.split(",") if v.strip())


def _mat(s):
    return tuple(_vec(row) for row in s.split(";") if row.strip())


def _bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _opt_float(s):
    return None if s.strip().lower() in ("", "none", "auto") else float(s)


def _opt_int(s):
    return None if s.strip().lower() in ("", "none") else int(s)


SCHEMA = {
    "sde": {
        "name": (str, "ou1d"),
        "init_low": (_vec, None),
        "init_high": (_vec, None),
        "n_traj": (int, 2000),
        "length": (int, 100),
        "dt": (float, 0.01),
        "seed": (int, 0),
    },
    "train": {
        "epochs": (int, 200),
        "n_batches": (int, 100),
        "batch_size": (int, 2000),
        "lr": (float, 1e-3),
        "seed": (_opt_int, None),
        "latent_dim": (int, 1),
        "encoder_hidden": (_ints, (20, 20, 20)),
        "decoder_hidden": (_ints, (20, 20, 20)),
        "lam": (float, 1.0),
        "tau": (float, 1.0),
        "nu": (float, 0.1),
        "bandwidth": (_opt_float, None),
        "squared": (_bool, False),
        "deterministic": (_bool, True),
        "patience": (_opt_int, None),
        "ema_decay": (_opt_float, 0.999),
        "max_nz": (int, 3),
        "drop_ratio": (float, 10.0),
    },
    "eval": {
        "x0": (_vec, None),
        "n_samples": (int, 20000),
        "n_steps": (_opt_int, None),
        "grid_low": (_vec, None),
        "grid_high": (_vec, None),
        "grid_points": (int, 16),
        "n_mc": (int, 20000),
        "mode": (str, "arithmetic"),
        "held_out": (int, 10000),
        "seed": (_opt_int, None),
    },
    "output": {
        "dir": (str, None),
        "csv": (_bool, True),
    },
}

# per-SDE parameters accepted inline in [sde], parsed by field type
_PARAM_PARSERS = {float: float, "float": float, tuple: _mat, "tuple": _mat}


def _locate(text, section, key=None):
    current = None
    for n, line in enumerate(text.splitlines(), 1):
        m = re.match(r"\s*\[([^\]]+)\]", line)
        if m:
            current = m.group(1).strip()
            if key is None and current == section:
                return n
            continue
        if key is not None and current == section:
            m = re.match(r"\s*([^=:#;\s]+)\s*[=:]", line)
            if m and m.group(1).strip().lower() == key:
                return n
    return None


def _sde_params(name):
    try:
        spec = sde_mod.get_spec(name)
    except KeyError:
        return None, {}
    base = {f.name for f in dataclasses.fields(sde_mod.SdeSpec)}
    return spec, {f.name.lower(): f for f in dataclasses.fields(spec) if f.name not in base}


@dataclasses.dataclass
class RunConfig:
    sde: dict
    train: dict
    eval: dict
    output: dict
    sde_params: dict
    path: str | None = None

    @property
    def benchmark(self):
        bm = sde_mod.get_benchmark(self.sde["name"])
        if self.sde_params:
            bm = dataclasses.replace(bm, spec=dataclasses.replace(bm.spec, **self.sde_params))
        return bm

    @property
    def spec(self):
        return self.benchmark.spec

    def seed_for(self, section):
        explicit = self.train["seed"] if section == "train" else self.eval["seed"]
        if explicit is not None:
            return explicit
        stream = {"train": 1, "eval": 2}[section]
        return int(np.random.SeedSequence([self.sde["seed"], stream]).generate_state(1)[0])

    def train_config(self, latent_dim=None):
        from sfml.losses import LossWeights
        from sfml.training import TrainConfig

        t = self.train
        w = LossWeights(lam=t["lam"], tau=t["tau"], nu=t["nu"], bandwidth=t["bandwidth"], squared=t["squared"])
        return TrainConfig(
            epochs=t["epochs"],
            n_batches=t["n_batches"],
            batch_size=t["batch_size"],
            weights=w,
            lr=t["lr"],
            seed=self.seed_for("train"),
            latent_dim=latent_dim or t["latent_dim"],
            encoder_hidden=tuple(t["encoder_hidden"]),
            decoder_hidden=tuple(t["decoder_hidden"]),
            deterministic=t["deterministic"],
            patience=t["patience"],
            ema_decay=t["ema_decay"],
        )

    def to_ini(self):
        """The fully resolved configuration, defaults and derived seeds filled in."""
        cp = configparser.ConfigParser(interpolation=None)
        bm = self.benchmark

        def fmt(v):
            if v is None:
                return "none"
            if isinstance(v, bool):
                return "true" if v else "false"
            if isinstance(v, tuple) and v and isinstance(v[0], tuple):
                return "; ".join(", ".join(repr(float(x)) for x in row) for row in v)
            if isinstance(v, tuple):
                return ", ".join(repr(x) for x in v)
            return repr(v) if isinstance(v, float) else str(v)

        sde = dict(self.sde)
        sde["init_low"] = sde["init_low"] or bm.init_low
        sde["init_high"] = sde["init_high"] or bm.init_high
        cp["sde"] = {k: fmt(v) for k, v in sde.items()}
        for k, v in self.sde_params.items():
            cp["sde"][k] = fmt(v)
        train = dict(self.train)
        train["seed"] = self.seed_for("train")
        cp["train"] = {k: fmt(v) for k, v in train.items()}
        ev = dict(self.eval)
        ev["seed"] = self.seed_for("eval")
        ev["x0"] = ev["x0"] or bm.x0
        ev["n_steps"] = ev["n_steps"] or self.default_eval_steps()
        cp["eval"] = {k: fmt(v) for k, v in ev.items()}
        cp["output"] = {k: fmt(v) for k, v in self.output.items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def default_eval_steps(self):
        return int(round(self.benchmark.horizon / self.sde["dt"]))


def parse_config(text, path=None):
    cp = configparser.ConfigParser(interpolation=None, strict=True)
    try:
        cp.read_string(text, source=path or "<config>")
    except configparser.DuplicateOptionError as exc:
        raise ConfigError(f"duplicate key {exc.option!r} in [{exc.section}]", exc.lineno) from None
    except configparser.DuplicateSectionError as exc:
        raise ConfigError(f"duplicate section [{exc.section}]", exc.lineno) from None
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError("key outside of any section", exc.lineno) from None
    except configparser.ParsingError as exc:
        line = exc.errors[0][0] if exc.errors else None
        raise ConfigError(f"cannot parse: {exc.message.splitlines()[-1].strip()}", line) from None

    values = {}
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]", _locate(text, section))

    name = cp.get("sde", "name", fallback=SCHEMA["sde"]["name"][1]).strip()
    spec, param_fields = _sde_params(name)
    if spec is None:
        raise ConfigError(f"unknown sde name {name!r} (key 'name')", _locate(text, "sde", "name"))

    sde_params = {}
    for section, keys in SCHEMA.items():
        out = {}
        given = cp[section] if cp.has_section(section) else {}
        for key in given:
            if key in keys:
                continue
            if section == "sde" and key in param_fields:
                f = param_fields[key]
                parser = _PARAM_PARSERS.get(f.type, float)
                try:
                    sde_params[f.name] = parser(given[key])
                except ValueError as exc:
                    raise ConfigError(f"bad value for {key!r}: {exc}", _locate(text, section, key)) from None
                continue
            raise ConfigError(f"unknown key {key!r} in [{section}]", _locate(text, section, key))
        for key, (parser, default) in keys.items():
            if key in given:
                try:
                    out[key] = parser(given[key])
                except ValueError as exc:
                    raise ConfigError(f"bad value for {key!r}: {exc}", _locate(text, section, key)) from None
            else:
                out[key] = default
        values[section] = out

    cfg = RunConfig(values["sde"], values["train"], values["eval"], values["output"], sde_params, path)
    try:
        cfg.spec
        if cfg.eval["mode"] not in ("arithmetic", "geometric"):
            raise ValueError(f"mode must be arithmetic or geometric, got {cfg.eval['mode']!r}")
        cfg.train_config()
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path):
    with open(path) as f:
        text = f.read()
    return parse_config(text, str(path))
