"""Flat INI experiment configuration: schema, parsing and cross-checks.

Every key is documented in :data:`SCHEMA` as ``(type, default, help)``.
Lengths are in the same unit as ``geometry.voxel_size``; angles in degrees.
Unknown sections or keys are rejected, and cross-references between
sections are validated before any computation starts.
"""
from __future__ import annotations

import configparser
import io
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, UnsupportedCombinationError

REQUIRED = object()

SCHEMA = {
    "geometry": {
        "mode": ("str", "parallel", "parallel | divergent"),
        "shape": ("ints", REQUIRED, "grid size, comma separated (2 or 3 entries)"),
        "voxel_size": ("float", 1.0, "voxel edge length"),
        "omega": ("str", "ball", "reconstruction domain: box | ball | cylinder"),
        "n_angles": ("int", REQUIRED, "number of equally spaced views"),
        "angle_span_deg": ("float", 180.0, "angular range covered by the views"),
        "angle_offset_deg": ("float", 0.0, "angle of the first view"),
        "source_distance": ("float", 0.0, "source to rotation axis distance (divergent only)"),
        "n_det": ("int", None, "detector pixels along the in-plane axis; empty = cover the domain"),
        "pitch": ("float", None, "detector pitch (an angle for divergent beams); empty = voxel size"),
    },
    "phantom": {
        "kind": ("str", "random_ellipses", "random_ellipses | shepp_logan | balls_3d"),
        "count": ("int", 10, "number of ellipses or balls"),
        "seed": ("int", 0, "phantom seed"),
        "value_min": ("float", 0.2, "smallest painted value"),
        "value_max": ("float", 1.0, "largest painted value"),
    },
    "noise": {
        "gaussian_rel": ("float", 0.0, "relative 2-norm of additive Gaussian noise"),
        "dead_pixel_frac": ("float", 0.0, "fraction of dead detector pixels"),
        "dead_value": ("float", 0.0, "value measured by dead pixels"),
        "poisson_exposure": ("float", None, "Poisson resampling exposure; empty = none"),
        "seed": ("int", 0, "noise seed"),
    },
    "model": {
        "formation": ("str", "identity", "identity | beer_lambert | xpct | polyct"),
        "intensity": ("float", 1.0, "incident intensity for beer_lambert"),
        "fresnel_number": ("float", 0.01, "per-pixel Fresnel number for xpct"),
        "pad": ("bool", True, "zero-pad projections to twice their size before propagation"),
        "spectrum": ("str", "flat", "'flat' or path of an energy_kev,intensity CSV"),
        "e_min_kev": ("float", 30.0, "flat spectrum lower energy"),
        "e_max_kev": ("float", 120.0, "flat spectrum upper energy"),
        "n_energies": ("int", 20, "flat spectrum sample count"),
        "e0_kev": ("float", 70.0, "reference energy"),
        "materials": ("str", "default", "'default' or path of an f,phi,theta CSV"),
    },
    "fidelity": {
        "kind": ("str", "l2", "l2 | weighted_l2 | huber | student_t | poisson_dark | poisson_bright"),
        "sigma": ("float", 1.0, "noise standard deviation for weighted_l2"),
        "nu": ("float", None, "robustness scale; empty = 20 % of the data std"),
        "exposure": ("float", 1.0, "exposure time of the Poisson models"),
        "omega": ("float", 1.0, "pixel sensitivity of the Poisson models"),
        "preprocess": ("str", "auto", "auto | none | log (log turns intensities into projections)"),
    },
    "penalty": {
        "family": ("str", "l2", "l2 | weighted_l2 | weighted_projector | w12 | lq"),
        "alpha": ("float", 600.0, "step regularization weight"),
        "gamma": ("float", 0.0, "gradient share of the w12 penalty"),
        "q": ("float", 2.0, "exponent of the lq penalty"),
    },
    "plan": {
        "pipeline": ("str", "gensart", "gensart | fbp | tikhonov | xpct | polyct"),
        "cycle": ("str", "symmetric", "plain | symmetric"),
        "ordering": ("str", "multilevel", "multilevel | sequential"),
        "n_cycles": ("int", 1, "number of cycles"),
        "k_stop": ("int", None, "number of steps; empty = n_cycles full cycles"),
        "box_min": ("float", None, "lower box bound; empty = none"),
        "box_max": ("float", None, "upper box bound; empty = none"),
        "nonneg": ("bool", False, "clamp xpct iterates at zero"),
        "filter": ("str", "ram-lak", "fbp filter: ram-lak | shepp-logan"),
        "alpha_tik": ("float", 300.0, "Tikhonov weight"),
        "tikhonov_fidelity": ("str", "l2", "l2 (conjugate gradients) | huber (primal-dual)"),
        "gap_tol": ("float", 0.01, "relative duality gap of the primal-dual solver"),
        "maxiter": ("int", 500, "iteration cap of the Tikhonov solvers"),
        "initial": ("str", "", "raw volume used as initial guess; empty = zeros"),
    },
    "output": {
        "dir": ("str", "out", "output directory"),
        "images": ("bool", True, "write PGM slice images"),
        "figures": ("bool", True, "write PNG figures"),
    },
}

CHOICES = {
    ("geometry", "mode"): ("parallel", "divergent"),
    ("geometry", "omega"): ("box", "ball", "cylinder"),
    ("phantom", "kind"): ("random_ellipses", "shepp_logan", "balls_3d"),
    ("model", "formation"): ("identity", "beer_lambert", "xpct", "polyct"),
    ("fidelity", "kind"): ("l2", "weighted_l2", "huber", "student_t", "poisson_dark",
                           "poisson_bright"),
    ("fidelity", "preprocess"): ("auto", "none", "log"),
    ("penalty", "family"): ("l2", "weighted_l2", "weighted_projector", "w12", "lq"),
    ("plan", "pipeline"): ("gensart", "fbp", "tikhonov", "xpct", "polyct"),
    ("plan", "cycle"): ("plain", "symmetric"),
    ("plan", "ordering"): ("multilevel", "sequential"),
    ("plan", "filter"): ("ram-lak", "shepp-logan"),
    ("plan", "tikhonov_fidelity"): ("l2", "huber"),
}


def _convert(kind, text, where):
    text = text.strip()
    if text == "":
        return None
    try:
        if kind == "str":
            return text
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "bool":
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if kind == "ints":
            return [int(t) for t in text.split(",")]
        if kind == "floats":
            return [float(t) for t in text.split(",")]
    except ValueError as exc:
        raise ConfigurationError(f"{where}: {exc}") from exc
    raise AssertionError(kind)


def _format(kind, value):
    if value is None:
        return ""
    if kind in ("ints", "floats"):
        return ",".join(str(v) for v in value)
    if kind == "bool":
        return "true" if value else "false"
    return str(value)


@dataclass
class ExperimentConfig:
    """Resolved configuration: ``values[section][key]`` with defaults filled in."""

    values: dict

    def __getitem__(self, section):
        return self.values[section]

    def dump(self) -> str:
        """INI text of the full resolved configuration."""
        cp = configparser.ConfigParser(interpolation=None)
        for sec, keys in SCHEMA.items():
            cp[sec] = {k: _format(keys[k][0], self.values[sec][k]) for k in keys}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @property
    def ndim(self) -> int:
        return len(self.values["geometry"]["shape"])

    def angles(self) -> np.ndarray:
        g = self.values["geometry"]
        n = g["n_angles"]
        return np.deg2rad(g["angle_offset_deg"] + g["angle_span_deg"] * np.arange(n) / n)


def parse_config(text: str, require=("geometry",)) -> ExperimentConfig:
    """Parse INI text, fill defaults and validate.

    ``require`` lists the sections whose required keys must be present.
    """
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(f"cannot parse config: {exc}") from exc
    values = {}
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ConfigurationError(f"unknown section [{sec}]")
        for key in cp[sec]:
            if key not in SCHEMA[sec]:
                raise ConfigurationError(f"unknown key {sec}.{key}")
    for sec, keys in SCHEMA.items():
        values[sec] = {}
        for key, (kind, default, _) in keys.items():
            if cp.has_option(sec, key):
                v = _convert(kind, cp[sec][key], f"{sec}.{key}")
            else:
                v = None
            if v is None:
                if default is REQUIRED:
                    if sec in require:
                        raise ConfigurationError(f"missing required key {sec}.{key}")
                    v = None
                else:
                    v = default
            choices = CHOICES.get((sec, key))
            if choices is not None and v not in choices:
                raise ConfigurationError(f"{sec}.{key} must be one of {', '.join(choices)}; got {v!r}")
            values[sec][key] = v
    cfg = ExperimentConfig(values)
    validate(cfg)
    return cfg


def load_config(path, require=("geometry",)) -> ExperimentConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, require)


def validate(cfg: ExperimentConfig):
    """Cross-section checks that must pass before any computation."""
    g, ph, nz = cfg["geometry"], cfg["phantom"], cfg["noise"]
    md, pn, pl = cfg["model"], cfg["penalty"], cfg["plan"]
    if g["shape"] is not None:
        if len(g["shape"]) not in (2, 3) or min(g["shape"]) < 1:
            raise ConfigurationError("geometry.shape needs 2 or 3 positive entries")
        nd = len(g["shape"])
        if g["n_det"] is not None and g["n_det"] < 1:
            raise ConfigurationError("geometry.n_det must be positive")
        if g["pitch"] is not None and not g["pitch"] > 0:
            raise ConfigurationError("geometry.pitch must be positive")
        if ph["kind"] == "balls_3d" and nd != 3:
            raise ConfigurationError("phantom.kind balls_3d needs a 3D grid")
        if ph["kind"] in ("random_ellipses", "shepp_logan") and nd != 2:
            raise ConfigurationError(f"phantom.kind {ph['kind']} needs a 2D grid")
    if g["n_angles"] is not None and g["n_angles"] < 1:
        raise ConfigurationError("geometry.n_angles must be positive")
    if g["voxel_size"] <= 0:
        raise ConfigurationError("geometry.voxel_size must be positive")
    divergent = g["mode"] == "divergent"
    if divergent and not g["source_distance"] > 0:
        raise ConfigurationError("geometry.source_distance must be positive for divergent beams")
    if not 0 <= nz["dead_pixel_frac"] <= 1:
        raise ConfigurationError("noise.dead_pixel_frac must lie in [0, 1]")
    if nz["gaussian_rel"] < 0:
        raise ConfigurationError("noise.gaussian_rel must be nonnegative")
    if not pn["alpha"] > 0:
        raise ConfigurationError("penalty.alpha must be positive")
    if not 0 <= pn["gamma"] <= 1:
        raise ConfigurationError("penalty.gamma must lie in [0, 1]")
    if pn["family"] == "lq" and pn["q"] < 1:
        raise ConfigurationError("penalty.q must be at least 1")
    pipe = pl["pipeline"]
    if pn["family"] == "lq" and divergent and pipe == "gensart":
        raise UnsupportedCombinationError("penalty.family lq requires parallel beams")
    if pn["family"] in ("weighted_l2", "weighted_projector") and pipe == "gensart":
        raise ConfigurationError(f"penalty.family {pn['family']} needs a weight volume; "
                                 "not available from the command line")
    if pipe == "xpct":
        if divergent:
            raise UnsupportedCombinationError("pipeline xpct requires parallel beams")
        if md["formation"] != "xpct":
            raise ConfigurationError("pipeline xpct needs model.formation = xpct")
        if pn["family"] not in ("l2", "w12"):
            raise ConfigurationError("pipeline xpct supports penalty.family l2 or w12")
    if pipe == "polyct" and md["formation"] != "polyct":
        raise ConfigurationError("pipeline polyct needs model.formation = polyct")
    if pipe in ("gensart", "fbp", "tikhonov") and md["formation"] in ("xpct", "polyct"):
        raise ConfigurationError(f"pipeline {pipe} cannot invert model.formation {md['formation']}")
    if pipe == "fbp" and divergent:
        raise UnsupportedCombinationError("pipeline fbp is implemented for parallel beams")
    if md["formation"] == "xpct" and not md["fresnel_number"] > 0:
        raise ConfigurationError("model.fresnel_number must be positive")
    if pl["n_cycles"] < 0 or (pl["k_stop"] is not None and pl["k_stop"] < 0):
        raise ConfigurationError("plan.n_cycles and plan.k_stop must be nonnegative")
    if (pl["box_min"] is not None and pl["box_max"] is not None
            and pl["box_min"] > pl["box_max"]):
        raise ConfigurationError("plan.box_min must not exceed plan.box_max")
