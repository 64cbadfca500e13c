"""Experiment configuration files.

Configs are INI files (``key = value`` lines grouped in ``[section]``
blocks). Sections and keys::

    [experiment]  n, d, models, output_dir, seed
    [seeds]       data, truth, fit, generate, eval      (optional overrides)
    [copula]      kind, corr_seed, alpha, nu, weights, blocks
    [margin]      kind
    [data]        csv, train_fraction                   (user data instead of a copula)
    [eval]        M, N, bins, quantiles, baseline, workers
    [vmf]         K, iterations, kappa_cap
    [flow_matching] max_epochs, patience, batch_size, val_fraction, lr, hidden,
                    steps, integrator
    [gan]         epochs, batch_size, lr, beta1, hidden, latent_dim
    [study]       copulas, margins, n, d                (grid files only)

Lists are comma separated. The copula ``kind`` may be a name or the study
number 1-5. Stage seeds not given in ``[seeds]`` are derived from the
master ``seed`` with :func:`derive_seed`.
"""

import configparser
from dataclasses import asdict, dataclass, field, replace
import hashlib
import json
from pathlib import Path

import numpy as np

from .datagen import COPULA_KINDS, COPULA_NUMBERS, MARGIN_KINDS

MODEL_NAMES = ("vmf", "flow_matching", "gan")
STAGES = ("data", "truth", "fit", "generate", "eval")


class ConfigError(ValueError):
    pass


def derive_seed(master, stage):
    """64-bit stage seed from a master seed.

    Uses numpy's ``SeedSequence`` hash with ``spawn_key=(index of stage,)``
    so that each stage draws from a statistically independent stream that
    does not change when other stages are reconfigured.
    """
    key = STAGES.index(stage) if isinstance(stage, str) else int(stage)
    words = np.random.SeedSequence(int(master), spawn_key=(key,)).generate_state(2, np.uint32)
    return int(words[0]) | (int(words[1]) << 32)


@dataclass
class CopulaConfig:
    kind: str = "gaussian"
    corr_seed: int = 2024
    alpha: float = 0.5
    nu: float = 0.3
    weights: tuple = (0.5, 0.5)
    blocks: tuple = ()


@dataclass
class EvalConfig:
    M: int = 100_000
    N: int = 100_000
    bins: int = 50
    quantiles: int = 199
    baseline: str = "vmf"
    workers: int = 0

    @property
    def quantile_grid(self):
        return np.linspace(0.005, 0.995, self.quantiles)


@dataclass
class VmfConfig:
    K: int = 100
    iterations: int = 10
    kappa_cap: float = 5e3


@dataclass
class FlowConfig:
    max_epochs: int = 5000
    patience: int = 500
    batch_size: int = 256
    val_fraction: float = 0.2
    lr: float = 1e-4
    hidden: tuple = (128, 128, 128, 128)
    steps: int = 100
    integrator: str = "euler_project"


@dataclass
class GanConfig:
    epochs: int = 1000
    batch_size: int = 256
    lr: float = 1e-4
    beta1: float = 0.9
    hidden: tuple = (128, 128, 128, 128)
    latent_dim: int = 0  # 0 means d - 1


@dataclass
class ExperimentConfig:
    n: int = 1000
    d: int = 5
    models: tuple = MODEL_NAMES
    output_dir: str = "runs/experiment"
    seed: int = 0
    seeds: dict = field(default_factory=dict)
    copula: CopulaConfig = field(default_factory=CopulaConfig)
    margin: str = "laplace"
    data_csv: str = ""
    train_fraction: float = 0.2
    eval: EvalConfig = field(default_factory=EvalConfig)
    vmf: VmfConfig = field(default_factory=VmfConfig)
    flow_matching: FlowConfig = field(default_factory=FlowConfig)
    gan: GanConfig = field(default_factory=GanConfig)

    def stage_seed(self, stage):
        if stage in self.seeds:
            return int(self.seeds[stage])
        return derive_seed(self.seed, stage)

    def to_dict(self):
        return asdict(self)

    def config_hash(self):
        canonical = json.dumps(self.to_dict(), sort_keys=True, default=list)
        return hashlib.sha256(canonical.encode()).hexdigest()

    def with_overrides(self, **kwargs):
        return replace(self, **kwargs)

    def validate(self):
        if self.d < 2:
            raise ConfigError("d must be at least 2")
        if self.n < 1 and not self.data_csv:
            raise ConfigError("n must be positive")
        if not self.models:
            raise ConfigError("at least one model is required")
        for m in self.models:
            if m not in MODEL_NAMES:
                raise ConfigError(f"unknown model {m!r}; expected a subset of {MODEL_NAMES}")
        if self.copula.kind not in COPULA_KINDS:
            raise ConfigError(f"unknown copula kind {self.copula.kind!r}")
        if self.margin not in MARGIN_KINDS:
            raise ConfigError(f"unknown margin {self.margin!r}")
        if not 0.0 < self.copula.alpha <= 1.0:
            raise ConfigError("copula alpha must lie in (0, 1]")
        if not self.copula.nu > 0:
            raise ConfigError("copula nu must be positive")
        w = np.asarray(self.copula.weights, dtype=float)
        if w.size != 2 or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ConfigError("copula weights must be two probabilities summing to 1")
        if self.copula.blocks and sum(self.copula.blocks) != self.d:
            raise ConfigError("copula blocks must sum to d")
        if self.eval.M < 1 or self.eval.N < 1:
            raise ConfigError("eval M and N must be at least 1")
        if self.eval.bins < 1 or self.eval.quantiles < 2:
            raise ConfigError("eval bins must be >= 1 and quantiles >= 2")
        if self.eval.baseline not in MODEL_NAMES:
            raise ConfigError(f"unknown baseline {self.eval.baseline!r}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction must lie in (0, 1)")
        if self.vmf.K < 1 or self.vmf.iterations < 1:
            raise ConfigError("vmf K and iterations must be at least 1")
        fm = self.flow_matching
        if not 1 <= fm.patience < fm.max_epochs:
            raise ConfigError("flow_matching patience must satisfy 1 <= patience < max_epochs")
        if fm.batch_size < 1 or fm.steps < 1 or not 0 < fm.val_fraction < 1:
            raise ConfigError("invalid flow_matching batch_size, steps or val_fraction")
        if fm.integrator not in ("euler_project", "rk4_project"):
            raise ConfigError(f"unknown integrator {fm.integrator!r}")
        if self.gan.epochs < 1 or self.gan.batch_size < 1:
            raise ConfigError("gan epochs and batch_size must be at least 1")
        if not 0.0 <= self.gan.beta1 < 1.0:
            raise ConfigError("gan beta1 must lie in [0, 1)")
        for s in self.seeds:
            if s not in STAGES:
                raise ConfigError(f"unknown seed stage {s!r}")
        return self


@dataclass
class StudyGrid:
    base: ExperimentConfig
    copulas: tuple = (1, 2, 3, 4, 5)
    margins: tuple = MARGIN_KINDS
    ns: tuple = (1000, 10_000, 100_000)
    ds: tuple = (5, 10)

    def cells(self):
        for c in self.copulas:
            for m in self.margins:
                for n in self.ns:
                    for d in self.ds:
                        yield c, m, n, d


# ---------------------------------------------------------------------------
# parsing

_SCHEMA = {
    "experiment": {"n": int, "d": int, "models": "names", "output_dir": str, "seed": int},
    "seeds": {s: int for s in STAGES},
    "copula": {"kind": str, "corr_seed": int, "alpha": float, "nu": float,
               "weights": "floats", "blocks": "ints"},
    "margin": {"kind": str},
    "data": {"csv": str, "train_fraction": float},
    "eval": {"m": int, "n": int, "bins": int, "quantiles": int, "baseline": str, "workers": int},
    "vmf": {"k": int, "iterations": int, "kappa_cap": float},
    "flow_matching": {"max_epochs": int, "patience": int, "batch_size": int,
                      "val_fraction": float, "lr": float, "hidden": "ints",
                      "steps": int, "integrator": str},
    "gan": {"epochs": int, "batch_size": int, "lr": float, "beta1": float, "hidden": "ints", "latent_dim": int},
    "study": {"copulas": "names", "margins": "names", "n": "ints", "d": "ints"},
}


def _convert(raw, kind, where):
    try:
        if kind == "names":
            return tuple(p.strip() for p in raw.split(",") if p.strip())
        if kind == "ints":
            return tuple(int(p) for p in raw.split(",") if p.strip())
        if kind == "floats":
            return tuple(float(p) for p in raw.split(",") if p.strip())
        return kind(raw.strip())
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r} ({exc})") from exc


def _parse_sections(text, source):
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    out = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"{source}: unknown section [{section}]")
        values = {}
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"{source}: unknown key {key!r} in [{section}]")
            values[key] = _convert(raw, _SCHEMA[section][key], f"[{section}] {key}")
        out[section] = values
    return out


def _copula_kind(raw):
    raw = str(raw).strip()
    if raw.isdigit():
        if int(raw) not in COPULA_NUMBERS:
            raise ConfigError(f"copula number must be 1-5, got {raw}")
        return COPULA_NUMBERS[int(raw)]
    return raw


def _build(sections):
    cfg = ExperimentConfig()
    exp = sections.get("experiment", {})
    for key in ("n", "d", "output_dir", "seed"):
        if key in exp:
            setattr(cfg, key, exp[key])
    if "models" in exp:
        cfg.models = exp["models"]
    cfg.seeds = dict(sections.get("seeds", {}))
    cop = sections.get("copula", {})
    cfg.copula = CopulaConfig(
        kind=_copula_kind(cop.get("kind", "gaussian")),
        corr_seed=cop.get("corr_seed", 2024),
        alpha=cop.get("alpha", 0.5),
        nu=cop.get("nu", 0.3),
        weights=cop.get("weights", (0.5, 0.5)),
        blocks=cop.get("blocks", ()),
    )
    cfg.margin = sections.get("margin", {}).get("kind", "laplace")
    data = sections.get("data", {})
    cfg.data_csv = data.get("csv", "")
    cfg.train_fraction = data.get("train_fraction", 0.2)
    ev = sections.get("eval", {})
    cfg.eval = EvalConfig(
        M=ev.get("m", 100_000), N=ev.get("n", 100_000), bins=ev.get("bins", 50),
        quantiles=ev.get("quantiles", 199), baseline=ev.get("baseline", "vmf"),
        workers=ev.get("workers", 0),
    )
    vm = sections.get("vmf", {})
    cfg.vmf = VmfConfig(K=vm.get("k", 100), iterations=vm.get("iterations", 10),
                        kappa_cap=vm.get("kappa_cap", 5e3))
    cfg.flow_matching = FlowConfig(**{**asdict(FlowConfig()), **sections.get("flow_matching", {})})
    cfg.gan = GanConfig(**{**asdict(GanConfig()), **sections.get("gan", {})})
    return cfg


def parse_config(text, source="<config>"):
    sections = _parse_sections(text, source)
    if "study" in sections:
        raise ConfigError(f"{source}: [study] belongs in a grid file; use the study command")
    return _build(sections).validate()


def load_config(path):
    path = Path(path)
    return parse_config(path.read_text(), str(path))


def load_study_grid(path):
    path = Path(path)
    sections = _parse_sections(path.read_text(), str(path))
    study = sections.pop("study", None)
    if study is None:
        raise ConfigError(f"{path}: grid file needs a [study] section")
    base = _build(sections)
    grid = StudyGrid(
        base=base,
        copulas=tuple(_copula_kind(c) for c in study.get("copulas", ("1", "2", "3", "4", "5"))),
        margins=study.get("margins", MARGIN_KINDS),
        ns=study.get("n", (1000, 10_000, 100_000)),
        ds=study.get("d", (5, 10)),
    )
    for c, m, n, d in grid.cells():
        replace(base, copula=replace(base.copula, kind=c, blocks=()), margin=m, n=n, d=d).validate()
    return grid


def format_config(cfg):
    """Render a config back to INI text (round-trips through :func:`parse_config`)."""
    def join(v):
        return ", ".join(str(x) for x in v)

    lines = [
        "[experiment]",
        f"n = {cfg.n}", f"d = {cfg.d}", f"models = {join(cfg.models)}",
        f"output_dir = {cfg.output_dir}", f"seed = {cfg.seed}", "",
    ]
    if cfg.seeds:
        lines += ["[seeds]"] + [f"{k} = {v}" for k, v in sorted(cfg.seeds.items())] + [""]
    c = cfg.copula
    lines += ["[copula]", f"kind = {c.kind}", f"corr_seed = {c.corr_seed}", f"alpha = {c.alpha!r}",
              f"nu = {c.nu!r}", f"weights = {join(c.weights)}"]
    if c.blocks:
        lines.append(f"blocks = {join(c.blocks)}")
    lines += ["", "[margin]", f"kind = {cfg.margin}", ""]
    if cfg.data_csv:
        lines += ["[data]", f"csv = {cfg.data_csv}", f"train_fraction = {cfg.train_fraction!r}", ""]
    e = cfg.eval
    lines += ["[eval]", f"M = {e.M}", f"N = {e.N}", f"bins = {e.bins}", f"quantiles = {e.quantiles}",
              f"baseline = {e.baseline}", f"workers = {e.workers}", ""]
    v = cfg.vmf
    lines += ["[vmf]", f"K = {v.K}", f"iterations = {v.iterations}", f"kappa_cap = {v.kappa_cap!r}", ""]
    f = cfg.flow_matching
    lines += ["[flow_matching]", f"max_epochs = {f.max_epochs}", f"patience = {f.patience}",
              f"batch_size = {f.batch_size}", f"val_fraction = {f.val_fraction!r}", f"lr = {f.lr!r}",
              f"hidden = {join(f.hidden)}", f"steps = {f.steps}", f"integrator = {f.integrator}", ""]
    g = cfg.gan
    lines += ["[gan]", f"epochs = {g.epochs}", f"batch_size = {g.batch_size}", f"lr = {g.lr!r}",
              f"beta1 = {g.beta1!r}", f"hidden = {join(g.hidden)}", f"latent_dim = {g.latent_dim}", ""]
    return "\n".join(lines)
