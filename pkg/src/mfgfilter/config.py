"""Flat ``key = value`` files for scenarios, MFG states and measurement sets.

Values are comma- or whitespace-separated numbers, or bare words. Every unit
conversion happens here, so the rest of the package only sees SI quantities.
"""

from __future__ import annotations

import configparser

import numpy as np

from .filters import BACKENDS, MeasurementNoiseSpec
from .harness import FILTER_NAMES, ConfigError, ScenarioConfig
from .measurement import AttitudeMeasurement, VectorMeasurement
from .mfg import MFGParams
from .so3 import DEF1, DEF2

DEG = np.pi / 180.0

# key -> (ScenarioConfig field, factor to SI, expected count or None for scalar)
_SCENARIO_NUMERIC = {
    "euler_amplitudes": ("euler_amplitudes", 1.0, 3),
    "euler_amplitudes_deg": ("euler_amplitudes", DEG, 3),
    "frequency": ("frequency", 1.0, None),
    "sigma_u": ("sigma_u", 1.0, None),
    "sigma_u_deg": ("sigma_u", DEG, None),
    "sigma_v": ("sigma_v", 1.0, None),
    "sigma_v_deg_per_hour": ("sigma_v", DEG / 3600.0, None),
    "gyro_rate": ("gyro_rate", 1.0, None),
    "meas_rate": ("meas_rate", 1.0, None),
    "duration": ("duration", 1.0, None),
    "init_bias_sd": ("init_bias_sd", 1.0, None),
    "large_init_S0": ("large_init_S0", 1.0, None),
    "large_init_bias": ("large_init_bias", 1.0, None),
    "large_init_bias_sd": ("large_init_bias_sd", 1.0, None),
    "w_M": ("w_M", 1.0, None),
    "w_G": ("w_G", 1.0, None),
}
_SCENARIO_OTHER = {"meas_noise", "meas_sigma", "meas_cov", "meas_F", "init", "trials", "seed", "filters"}
SCENARIO_KEYS = tuple(sorted(set(_SCENARIO_NUMERIC) | _SCENARIO_OTHER))


def read_kv(text):
    """Parse flat ``key = value`` text; ``#`` and ``;`` start comment lines."""
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",))
    parser.optionxform = str
    try:
        parser.read_string("[root]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse key-value file: {exc}") from exc
    return dict(parser["root"])


def read_kv_file(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return read_kv(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc


def numbers(value, count=None, key="value"):
    try:
        arr = np.array([float(v) for v in value.replace(",", " ").split()])
    except ValueError as exc:
        raise ConfigError(f"{key}: expected numbers, got {value!r}") from exc
    if count is None:
        if arr.size != 1:
            raise ConfigError(f"{key}: expected one number")
        return float(arr[0])
    sizes = count if isinstance(count, tuple) else (count,)
    if arr.size not in sizes:
        raise ConfigError(f"{key}: expected {' or '.join(map(str, sizes))} numbers, got {arr.size}")
    return arr


def _integer(value, key):
    x = numbers(value, key=key)
    if x != int(x):
        raise ConfigError(f"{key}: expected an integer")
    return int(x)


def _matrix(value, key, allow_diag=True):
    arr = numbers(value, (3, 9) if allow_diag else 9, key)
    return np.diag(arr) if arr.size == 3 else arr.reshape(3, 3)


def _meas_noise(kv):
    kind = kv.get("meas_noise", "gaussian")
    if kind in ("gaussian", "gaussian_rotvec"):
        if "meas_sigma" in kv and "meas_cov" in kv:
            raise ConfigError("give meas_sigma or meas_cov, not both")
        if "meas_cov" in kv:
            Sigma = _matrix(kv["meas_cov"], "meas_cov")
        else:
            sd = numbers(kv.get("meas_sigma", "0.2"), (1, 3), "meas_sigma")
            Sigma = np.diag(np.broadcast_to(sd, 3) ** 2)
        return MeasurementNoiseSpec.gaussian_rotvec(Sigma)
    if kind == "matrix_fisher":
        if "meas_F" not in kv:
            raise ConfigError("meas_noise = matrix_fisher needs meas_F")
        return MeasurementNoiseSpec.matrix_fisher(_matrix(kv["meas_F"], "meas_F"))
    raise ConfigError(f"meas_noise must be gaussian or matrix_fisher, got {kind!r}")


def scenario_from_kv(kv):
    """Build a validated ScenarioConfig; unknown or duplicated-meaning keys are errors."""
    unknown = sorted(set(kv) - set(SCENARIO_KEYS))
    if unknown:
        raise ConfigError(f"unknown keys: {', '.join(unknown)}")
    fields = {}
    for key, value in kv.items():
        if key not in _SCENARIO_NUMERIC:
            continue
        name, factor, count = _SCENARIO_NUMERIC[key]
        if name in fields:
            raise ConfigError(f"{name} given twice (via {key})")
        v = numbers(value, count, key)
        fields[name] = tuple(v * factor) if count else v * factor
    try:
        fields["meas_noise"] = _meas_noise(kv)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if "init" in kv:
        fields["init"] = kv["init"].strip()
    if "trials" in kv:
        fields["trials"] = _integer(kv["trials"], "trials")
    if "seed" in kv:
        fields["seed"] = _integer(kv["seed"], "seed")
    if "filters" in kv:
        fields["filters"] = tuple(f for f in kv["filters"].replace(",", " ").split())
    return ScenarioConfig(**fields)


def select_filters(families="mfg,mekf", backend="both"):
    """Filter names from CLI-style family and backend choices."""
    fams = {f.strip() for f in families.split(",") if f.strip()}
    if not fams or fams - {"mfg", "mekf"}:
        raise ConfigError("filters must be a comma list drawn from mfg, mekf")
    if backend not in ("analytical", "unscented", "both"):
        raise ConfigError("backend must be analytical, unscented or both")
    names = []
    if "mfg" in fams:
        names += [f"mfg_{b}" for b in BACKENDS if backend in (b, "both")]
    if "mekf" in fams:
        names.append("mekf")
    return tuple(n for n in FILTER_NAMES if n in names)


# --------------------------------------------------------------------------
# MFG states


def params_from_kv(kv):
    """MFGParams from keys mu, Sigma, P, U, S, V and optional convention (def1 | def2)."""
    try:
        mu = numbers(kv["mu"], tuple(range(1, 65)), "mu")
        n = mu.size
        Sigma = numbers(kv["Sigma"], (n, n * n), "Sigma")
        Sigma = np.diag(Sigma) if Sigma.size == n and n > 1 else Sigma.reshape(n, n)
        P = numbers(kv["P"], 3 * n, "P").reshape(n, 3) if "P" in kv else np.zeros((n, 3))
        U = _matrix(kv["U"], "U", allow_diag=False) if "U" in kv else np.eye(3)
        V = _matrix(kv["V"], "V", allow_diag=False) if "V" in kv else np.eye(3)
        S = numbers(kv["S"], 3, "S")
    except KeyError as exc:
        raise ConfigError(f"state is missing key {exc.args[0]}") from exc
    conv = kv.get("convention", "def1").strip().lower()
    if conv not in ("def1", "def2"):
        raise ConfigError("convention must be def1 or def2")
    try:
        return MFGParams(mu, Sigma, P, U, S, V, DEF1 if conv == "def1" else DEF2).validate()
    except ValueError as exc:
        raise ConfigError(f"invalid state: {exc}") from exc


def _fmt(values):
    return ", ".join(f"{v:.17g}" for v in np.ravel(values))


def params_to_kv(params):
    conv = "def1" if params.convention == DEF1 else "def2"
    lines = [f"convention = {conv}"]
    for key in ("mu", "Sigma", "P", "U", "S", "V"):
        lines.append(f"{key} = {_fmt(getattr(params, key))}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# measurement sets


def measurements_from_kv(kv):
    """Attitude and vector measurements.

    Keys are ``attitude.<label>.Z`` / ``attitude.<label>.F_Z`` and
    ``vector.<label>.z`` / ``.a`` / ``.kappa`` / optional ``.B``; a bare ``Z`` and
    ``F_Z`` pair is also accepted.
    """
    groups = {}
    for key, value in kv.items():
        parts = key.split(".")
        if len(parts) == 1 and key in ("Z", "F_Z"):
            parts = ["attitude", "", key]
        if len(parts) != 3 or parts[0] not in ("attitude", "vector"):
            raise ConfigError(f"unexpected measurement key {key!r}")
        groups.setdefault((parts[0], parts[1]), {})[parts[2]] = value
    att, vec = [], []
    try:
        for (kind, label), g in sorted(groups.items()):
            where = f"{kind}.{label}" if label else kind
            if kind == "attitude":
                if set(g) != {"Z", "F_Z"}:
                    raise ConfigError(f"{where} needs exactly Z and F_Z")
                att.append(AttitudeMeasurement(_matrix(g["Z"], "Z", False), _matrix(g["F_Z"], "F_Z")))
            else:
                if not {"z", "a", "kappa"} <= set(g) or set(g) - {"z", "a", "kappa", "B"}:
                    raise ConfigError(f"{where} needs z, a, kappa and optionally B")
                B = _matrix(g["B"], "B", False) if "B" in g else np.eye(3)
                vec.append(
                    VectorMeasurement(
                        numbers(g["z"], 3, "z"), numbers(g["a"], 3, "a"), numbers(g["kappa"], key="kappa"), B
                    )
                )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    return tuple(att), tuple(vec)
