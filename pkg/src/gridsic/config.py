"""Run configuration: parsing, validation, serialization, presets.

The file format is a flat sectioned key-value grammar:

    # comment
    [section]
    key = value        # scalar
    key = v1 v2 v3     # whitespace-separated list

Sections and keys are fixed by the schema below; unknown ones are errors,
as are missing required keys and out-of-range values.  Validation collects
every problem before reporting, so a config is fixed in one round trip.  A
top-level line ``preset = NAME`` (before any section) expands the committed
preset file of that name first; sections following it override per key.

``serialize`` writes a canonical form that ``parse_config`` maps back to an
equal RunConfig.
"""

import math
from dataclasses import asdict, dataclass, field, fields
from importlib import resources

import numpy as np

from .dynamics import GroundStateConfig, PropagatorConfig, System
from .grid import Grid
from .hamiltonian import Scheme
from .potentials import InteractionKernel, MeanField, XcFunctional

PRESET_NAMES = ("hchain4", "hchain8", "qdot6", "twowell2")


class ConfigError(ValueError):
    """Carries the full list of validation problems, one per line."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("\n".join(self.errors))


@dataclass
class SystemSpec:
    npts: tuple
    h: float
    norb: int
    scheme: str
    potential: str
    bc: str = "box"
    omega: float = 0.0
    centers: tuple = ()
    depths: tuple = ()
    softenings: tuple = ()


@dataclass
class InteractionSpec:
    kind: str = "soft_coulomb"
    strength: float = 1.0
    softening: float = 1.0
    xc_coeff: float = 1.0
    xc_power: float = 4.0 / 3.0


@dataclass
class GroundSpec:
    step_size: float = 0.4
    tol: float = 1e-9
    max_iter: int = 20000
    loc_stride: int = 1
    precondition: bool = True
    precond_shift: float = 1.0
    subspace_stride: int = 10
    sym_tol: float = 1e-8
    stencil_order: int = 2
    branch_probes: int = 4
    branch_rounds: int = 3
    probe_seed: int = 20260816
    pot_mix: float = 0.5


@dataclass
class PropagationSpec:
    dt: float
    steps: int
    taylor_order: int = 4
    sym_stride: int = 1
    sc_iters: int = 2
    sym_tol: float = 1e-6
    stencil_order: int = 2
    resume_from: str = ""


@dataclass
class BoostSpec:
    k: tuple = ()


@dataclass
class OutputSpec:
    stride: int = 1
    checkpoint_stride: int = 0


@dataclass
class GkliSpec:
    mixing: float = 0.5
    tol: float = 1e-10
    max_iter: int = 2000


@dataclass
class SpectrumSpec:
    column: str = "dipole_x"
    damping: float = 0.0  # 0 selects the automatic window


@dataclass
class BenchSpec:
    schemes: tuple = ("alda", "slater", "tdsic", "gslat")
    steps: int = 40
    repeats: int = 3
    ground_scheme: str = "gslat"


@dataclass
class RunConfig:
    """Everything a command needs, grouped by config section."""

    system: SystemSpec
    interaction: InteractionSpec = field(default_factory=InteractionSpec)
    ground: GroundSpec = field(default_factory=GroundSpec)
    propagation: PropagationSpec | None = None
    boost: BoostSpec = field(default_factory=BoostSpec)
    output: OutputSpec = field(default_factory=OutputSpec)
    gkli: GkliSpec = field(default_factory=GkliSpec)
    spectrum: SpectrumSpec = field(default_factory=SpectrumSpec)
    bench: BenchSpec = field(default_factory=BenchSpec)


# key -> value kind; "floats"/"ints"/"strs" are whitespace-separated lists
_SCHEMA = {
    "system": {
        "npts": "ints",
        "h": "float",
        "bc": "str",
        "norb": "int",
        "scheme": "str",
        "potential": "str",
        "omega": "float",
        "centers": "floats",
        "depths": "floats",
        "softenings": "floats",
    },
    "interaction": {
        "kind": "str",
        "strength": "float",
        "softening": "float",
        "xc_coeff": "float",
        "xc_power": "float",
    },
    "ground": {
        "step_size": "float",
        "tol": "float",
        "max_iter": "int",
        "loc_stride": "int",
        "precondition": "bool",
        "precond_shift": "float",
        "subspace_stride": "int",
        "sym_tol": "float",
        "stencil_order": "int",
        "branch_probes": "int",
        "branch_rounds": "int",
        "probe_seed": "int",
        "pot_mix": "float",
    },
    "propagation": {
        "dt": "float",
        "steps": "int",
        "taylor_order": "int",
        "sym_stride": "int",
        "sc_iters": "int",
        "sym_tol": "float",
        "stencil_order": "int",
        "resume_from": "str",
    },
    "boost": {"k": "floats"},
    "output": {"stride": "int", "checkpoint_stride": "int"},
    "gkli": {"mixing": "float", "tol": "float", "max_iter": "int"},
    "spectrum": {"column": "str", "damping": "float"},
    "bench": {
        "schemes": "strs",
        "steps": "int",
        "repeats": "int",
        "ground_scheme": "str",
    },
}

_SECTION_TYPES = {
    "system": SystemSpec,
    "interaction": InteractionSpec,
    "ground": GroundSpec,
    "propagation": PropagationSpec,
    "boost": BoostSpec,
    "output": OutputSpec,
    "gkli": GkliSpec,
    "spectrum": SpectrumSpec,
    "bench": BenchSpec,
}

_REQUIRED_KEYS = {
    "system": ("npts", "h", "norb", "scheme", "potential"),
    "propagation": ("dt", "steps"),
}


def preset_text(name):
    """Raw text of a committed preset file."""
    if name not in PRESET_NAMES:
        raise ConfigError([f"unknown preset '{name}' (have {', '.join(PRESET_NAMES)})"])
    return (resources.files("gridsic") / "presets" / f"{name}.cfg").read_text()


def _convert(raw, kind, where, errors):
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(raw)
        if kind == "ints":
            return tuple(int(t) for t in raw.split())
        if kind == "floats":
            return tuple(float(t) for t in raw.split())
        if kind == "strs":
            return tuple(raw.split())
        return raw.strip()
    except ValueError:
        errors.append(f"{where}: cannot read '{raw}' as {kind}")
        return None


def _scan(text, errors):
    """Lex the text into {section: {key: raw_value}} plus any top-level preset."""
    sections = {}
    preset = None
    current = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            current = stripped[1:-1].strip()
            if current not in _SCHEMA:
                errors.append(f"line {lineno}: unknown section [{current}]")
                current = ("?", current)  # swallow its keys, already reported
            else:
                sections.setdefault(current, {})
            continue
        if "=" not in stripped:
            errors.append(f"line {lineno}: expected 'key = value', got '{stripped}'")
            continue
        key, _, raw = stripped.partition("=")
        key = key.strip()
        raw = raw.strip()
        if current is None:
            if key == "preset":
                preset = raw
            else:
                errors.append(f"line {lineno}: key '{key}' before any section")
            continue
        if isinstance(current, tuple):
            continue
        if key not in _SCHEMA[current]:
            errors.append(f"line {lineno}: unknown key '{key}' in section [{current}]")
            continue
        sections[current][key] = raw
    return sections, preset


def _validate(config, errors):
    sy = config.system
    if len(sy.npts) not in (1, 2):
        errors.append("[system] npts: need 1 or 2 entries")
    if any(n < 8 for n in sy.npts):
        errors.append("[system] npts: every axis needs at least 8 points")
    if not sy.h > 0:
        errors.append("[system] h: grid spacing must be positive")
    if sy.bc not in ("box", "periodic"):
        errors.append(f"[system] bc: '{sy.bc}' is not 'box' or 'periodic'")
    if sy.norb < 1:
        errors.append("[system] norb: need at least one orbital")
    try:
        Scheme.parse(sy.scheme)
    except ValueError:
        errors.append(
            f"[system] scheme: '{sy.scheme}' is not one of "
            f"{', '.join(s.value for s in Scheme)}"
        )
    if sy.potential == "harmonic":
        if not sy.omega > 0:
            errors.append("[system] omega: harmonic potential needs omega > 0")
    elif sy.potential == "soft_wells":
        if len(sy.npts) != 1:
            errors.append("[system] potential: soft_wells is one-dimensional")
        if not sy.centers:
            errors.append("[system] centers: soft_wells needs well positions")
        if len(sy.depths) != len(sy.centers):
            errors.append("[system] depths: need one depth per well center")
        if sy.softenings and len(sy.softenings) != len(sy.centers):
            errors.append("[system] softenings: need one per well center, or none")
        if any(not d > 0 for d in sy.depths):
            errors.append("[system] depths: well depths must be positive")
        if any(not s > 0 for s in sy.softenings):
            errors.append("[system] softenings: must be positive")
    else:
        errors.append(
            f"[system] potential: '{sy.potential}' is not 'harmonic' or 'soft_wells'"
        )

    ia = config.interaction
    if ia.kind not in ("soft_coulomb", "contact"):
        errors.append(f"[interaction] kind: '{ia.kind}' is not 'soft_coulomb' or 'contact'")
    if ia.strength < 0:
        errors.append("[interaction] strength: must be nonnegative")
    if ia.kind == "soft_coulomb" and not ia.softening > 0:
        errors.append("[interaction] softening: must be positive")
    if ia.xc_coeff < 0:
        errors.append("[interaction] xc_coeff: must be nonnegative")
    if not ia.xc_power > 1:
        errors.append("[interaction] xc_power: must exceed 1")

    gr = config.ground
    if not gr.tol > 0:
        errors.append("[ground] tol: must be positive")
    if not gr.step_size > 0:
        errors.append("[ground] step_size: must be positive")
    if gr.loc_stride < 1 or gr.subspace_stride < 1:
        errors.append("[ground] strides must be at least 1")
    if gr.stencil_order not in (2, 4):
        errors.append("[ground] stencil_order: must be 2 or 4")

    pr = config.propagation
    if pr is not None:
        if not pr.dt > 0:
            errors.append("[propagation] dt: must be positive")
        if pr.steps < 0:
            errors.append("[propagation] steps: must be nonnegative")
        if pr.taylor_order < 2:
            errors.append("[propagation] taylor_order: must be at least 2")
        if pr.sym_stride < 1:
            errors.append("[propagation] sym_stride: must be at least 1")
        if pr.sc_iters < 0:
            errors.append("[propagation] sc_iters: must be nonnegative")
        if pr.stencil_order not in (2, 4):
            errors.append("[propagation] stencil_order: must be 2 or 4")
        if pr.dt > 0 and sy.h > 0:
            bound = sy.h**2 / math.pi
            if pr.dt >= bound:
                errors.append(
                    f"[propagation] dt = {pr.dt:g} violates the Taylor stability "
                    f"bound dt < h^2/pi = {bound:g} at h = {sy.h:g}"
                )

    if config.boost.k and len(config.boost.k) != len(sy.npts):
        errors.append(
            f"[boost] k: need {len(sy.npts)} component(s) for a "
            f"{len(sy.npts)}-dimensional grid"
        )

    ou = config.output
    if ou.stride < 1:
        errors.append("[output] stride: must be at least 1")
    if ou.checkpoint_stride < 0:
        errors.append("[output] checkpoint_stride: must be nonnegative")

    gk = config.gkli
    if not 0 < gk.mixing <= 1:
        errors.append("[gkli] mixing: must lie in (0, 1]")
    if not gk.tol > 0:
        errors.append("[gkli] tol: must be positive")
    if gk.max_iter < 1:
        errors.append("[gkli] max_iter: must be at least 1")

    be = config.bench
    for name in be.schemes + (be.ground_scheme,):
        try:
            Scheme.parse(name)
        except ValueError:
            errors.append(f"[bench] scheme '{name}' is not recognized")
    if be.steps < 1:
        errors.append("[bench] steps: must be at least 1")
    if be.repeats < 1:
        errors.append("[bench] repeats: must be at least 1")
    if config.spectrum.damping < 0:
        errors.append("[spectrum] damping: must be nonnegative")


def parse_config(text):
    """Parse and validate; raises ConfigError listing every problem found."""
    errors = []
    sections, preset = _scan(text, errors)
    if preset is not None:
        base_errors = []
        base, nested = _scan(preset_text(preset), base_errors)
        errors.extend(base_errors)
        if nested is not None:
            errors.append("preset files must not reference other presets")
        for name, keys in sections.items():
            base.setdefault(name, {}).update(keys)
        sections = base
    if "system" not in sections:
        errors.append("missing system block")
        raise ConfigError(errors)

    built = {}
    for name, keys in sections.items():
        typed = {}
        for key, raw in keys.items():
            val = _convert(raw, _SCHEMA[name][key], f"[{name}] {key}", errors)
            if val is not None:
                typed[key] = val
        for key in _REQUIRED_KEYS.get(name, ()):
            if key not in typed:
                errors.append(f"[{name}] {key}: required key is missing")
        if any(k not in typed for k in _REQUIRED_KEYS.get(name, ())):
            continue
        built[name] = _SECTION_TYPES[name](**typed)
    if errors:
        raise ConfigError(errors)

    config = RunConfig(system=built["system"])
    for name, value in built.items():
        if name != "system":
            setattr(config, name, value)
    if not config.system.softenings and config.system.centers:
        config.system.softenings = tuple(1.0 for _ in config.system.centers)
    _validate(config, errors)
    if errors:
        raise ConfigError(errors)
    return config


def _format_value(val):
    if isinstance(val, bool):
        return "true" if val else "false"
    if isinstance(val, tuple):
        return " ".join(_format_value(v) for v in val)
    if isinstance(val, float):
        return repr(val)
    return str(val)


def serialize(config):
    """Canonical text form; parse_config maps it back to an equal RunConfig."""
    lines = []
    for name in _SCHEMA:
        spec = getattr(config, name)
        if spec is None:
            continue
        lines.append(f"[{name}]")
        for f in fields(spec):
            lines.append(f"{f.name} = {_format_value(getattr(spec, f.name))}")
        lines.append("")
    return "\n".join(lines)


def external_potential(spec, grid):
    """Evaluate the configured external potential on the grid."""
    if spec.potential == "harmonic":
        v = np.zeros(grid.shape)
        for mesh in grid.meshes():
            v = v + 0.5 * spec.omega**2 * mesh**2
        return v
    x = grid.axis(0)
    v = np.zeros(grid.shape)
    for c, d, s in zip(spec.centers, spec.depths, spec.softenings):
        v = v - d / np.sqrt((x - c) ** 2 + s**2)
    return v


def build_system(config):
    """Construct the Grid, MeanField and System the config describes."""
    sy = config.system
    grid = Grid(tuple(sy.npts), sy.h, sy.bc)
    ia = config.interaction
    mf = MeanField(
        grid,
        kernel=InteractionKernel(kind=ia.kind, strength=ia.strength, softening=ia.softening),
        xc=XcFunctional(coeff=ia.xc_coeff, power=ia.xc_power),
    )
    return System(grid, external_potential(sy, grid), mf, sy.norb)


def gkli_options(config):
    gk = config.gkli
    return {"mixing": gk.mixing, "tol": gk.tol, "max_iter": gk.max_iter}


def ground_config(config):
    opts = asdict(config.ground)
    return GroundStateConfig(**opts, gkli_opts=gkli_options(config))


def propagator_config(config, steps=None):
    """PropagatorConfig for the run; ``steps`` overrides the configured count."""
    pr = config.propagation
    if pr is None:
        raise ConfigError(["missing propagation block"])
    return PropagatorConfig(
        dt=pr.dt,
        steps=pr.steps if steps is None else steps,
        scheme=Scheme.parse(config.system.scheme),
        taylor_order=pr.taylor_order,
        sym_stride=pr.sym_stride,
        sc_iters=pr.sc_iters,
        sym_tol=pr.sym_tol,
        stencil_order=pr.stencil_order,
        output_stride=config.output.stride,
        checkpoint_stride=config.output.checkpoint_stride,
        gkli_opts=gkli_options(config),
    )
