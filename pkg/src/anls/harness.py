"""Command line runner: configuration, cached contexts, exports and manifests.

Configuration is INI-style key-value text read with configparser.  Every
section and key is known in advance; anything else is rejected, and all
violations are collected before a run starts.

    anls evolve --config run.ini --out runs/a
    anls verify --tier fast
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import hashlib
import io
import json
import math
import os
import sys
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from . import anderson as A
from . import checks
from . import dynamics as D
from . import manybody as MB
from .noise import Enhancement, MollifierSpec, enhance_from_seed
from .spectral import Field, Grid, set_fft_workers, write_field, write_kernel

CACHE_ENV = "ANLS_CACHE_DIR"
SUBCOMMANDS = ("enhance", "spectrum", "evolve", "manybody", "probe", "verify", "convergence")
FORMATS = ("jsonlines", "dsv")
DSV_SEP = "\t"

# documented export schemas (dsv column order)
REPORT_COLUMNS = ("t", "mass", "E0", "E1", "E1_tilde", "domain_norm", "form_norm")
SPECTRUM_COLUMNS = ("index", "eigenvalue", "residual")
PROBE_COLUMNS = ("kind", "q", "r", "gamma", "max", "median", "slope")
MANYBODY_COLUMNS = ("N", "delta", "grid", "T", "sup_trace_distance", "final_mass", "energy_drift", "bbgky_residual")
CONVERGENCE_COLUMNS = MB.ConvergenceRow.COLUMNS


def toolkit_version() -> str:
    try:
        from importlib.metadata import version

        return version("artifact")
    except Exception:
        return "0.1.0"


# ---------------------------------------------------------------------------
# configuration


class ConfigError(ValueError):
    """All violations found in a configuration."""

    def __init__(self, problems: Sequence[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass
class GridSection:
    d: int = 3
    n: int = 16


@dataclass
class NoiseSection:
    seed: int = 1
    delta: float = 0.25
    mollifier: str = "gaussian"  # "none" gives the zero enhancement


@dataclass
class CutoffSection:
    M: int | str = "auto"
    N: int | str = "auto"


@dataclass
class PotentialSection:
    kind: str = "bessel_riesz"
    beta: float = 1.0
    c_beta: float = 1.0


@dataclass
class EvolveSection:
    scheme: str = "strang"
    dt: float = 1e-3
    T: float = 0.1
    snapshot_stride: int = 10
    defocusing: bool = True
    initial_seed: int = 3
    initial_decay: float = 3.0


@dataclass
class ManyBodySection:
    N_list: list[int] = field(default_factory=lambda: [2, 3])
    delta_list: list[float] = field(default_factory=lambda: [0.5])
    n: int = 4
    T: float = 0.5
    dt: float = 0.01
    amplitude: float = 1.0


@dataclass
class ProbeSection:
    strichartz_pairs: list[tuple[float, float]] = field(default_factory=lambda: [(10.0 / 3.0, 10.0 / 3.0)])
    heat_gammas: list[float] = field(default_factory=lambda: [1.0])
    samples: int = 30


@dataclass
class OutputSection:
    directory: str = "runs"
    formats: list[str] = field(default_factory=lambda: ["jsonlines", "dsv"])


@dataclass
class ExperimentConfig:
    grid: GridSection = field(default_factory=GridSection)
    noise: NoiseSection = field(default_factory=NoiseSection)
    cutoffs: CutoffSection = field(default_factory=CutoffSection)
    potential: PotentialSection = field(default_factory=PotentialSection)
    evolve: EvolveSection = field(default_factory=EvolveSection)
    manybody: ManyBodySection = field(default_factory=ManyBodySection)
    probes: ProbeSection = field(default_factory=ProbeSection)
    output: OutputSection = field(default_factory=OutputSection)

    @property
    def grid_obj(self) -> Grid:
        return Grid(self.grid.d, self.grid.n)

    @property
    def zero_noise(self) -> bool:
        return self.noise.mollifier == "none"

    def mollifier(self) -> MollifierSpec:
        return MollifierSpec(self.noise.mollifier, self.noise.delta)

    def potential_spec(self) -> D.PotentialSpec:
        p = self.potential
        return D.PotentialSpec(p.kind, p.beta, p.c_beta)

    def probe_specs(self) -> list[D.ProbeSpec]:
        return [D.ProbeSpec(q=q, r=r, samples=self.probes.samples, seed=self.noise.seed) for q, r in self.probes.strichartz_pairs]

    def digest(self) -> str:
        return hashlib.sha256(serialize_config(self).encode()).hexdigest()


_SECTION_TYPES = {
    "grid": GridSection,
    "noise": NoiseSection,
    "cutoffs": CutoffSection,
    "potential": PotentialSection,
    "evolve": EvolveSection,
    "manybody": ManyBodySection,
    "probes": ProbeSection,
    "output": OutputSection,
}


def _fmt_float(x: float) -> str:
    return format(float(x), ".17g")


def _dump(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return _fmt_float(value)
    if isinstance(value, tuple):
        return ":".join(_dump(v) for v in value)
    if isinstance(value, list):
        return ", ".join(_dump(v) for v in value)
    return str(value)


def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_cutoff(s: str) -> int | str:
    s = s.strip()
    return "auto" if s.lower() == "auto" else int(s)


def _split(s: str) -> list[str]:
    return [x.strip() for x in s.split(",") if x.strip()]


def _parse_pair(s: str) -> tuple[float, float]:
    a, b = s.split(":")
    return (float(a), float(b))


_PARSERS: dict[tuple[str, str], Callable[[str], Any]] = {
    ("cutoffs", "M"): _parse_cutoff,
    ("cutoffs", "N"): _parse_cutoff,
    ("manybody", "N_list"): lambda s: [int(x) for x in _split(s)],
    ("manybody", "delta_list"): lambda s: [float(x) for x in _split(s)],
    ("probes", "strichartz_pairs"): lambda s: [_parse_pair(x) for x in _split(s)],
    ("probes", "heat_gammas"): lambda s: [float(x) for x in _split(s)],
    ("output", "formats"): _split,
}


def _parser_for(section: str, key: str, default: Any) -> Callable[[str], Any]:
    if (section, key) in _PARSERS:
        return _PARSERS[(section, key)]
    if isinstance(default, bool):
        return _parse_bool
    if isinstance(default, int):
        return lambda s: int(s.strip())
    if isinstance(default, float):
        return lambda s: float(s.strip())
    return lambda s: s.strip()


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate configuration text; raises ConfigError listing every problem."""
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__", inline_comment_prefixes=(";", "#"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError([f"malformed configuration: {exc}"]) from exc
    problems: list[str] = []
    cfg = ExperimentConfig()
    for section in cp.sections():
        if section not in _SECTION_TYPES:
            problems.append(f"unknown section [{section}]")
            continue
        obj = getattr(cfg, section)
        known = {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)}
        for key, raw in cp.items(section):
            if key not in known:
                problems.append(f"unknown key {section}.{key}")
                continue
            try:
                setattr(obj, key, _parser_for(section, key, known[key])(raw))
            except (ValueError, TypeError) as exc:
                problems.append(f"{section}.{key}: cannot parse {raw!r} ({exc})")
    problems.extend(validate(cfg))
    if problems:
        raise ConfigError(problems)
    return cfg


def serialize_config(cfg: ExperimentConfig) -> str:
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str
    for name in _SECTION_TYPES:
        obj = getattr(cfg, name)
        cp[name] = {f.name: _dump(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def _guard(problems: list[str], where: str, fn: Callable[[], Any]) -> None:
    try:
        fn()
    except (ValueError, TypeError) as exc:
        problems.append(f"{where}: {exc}")


def validate(cfg: ExperimentConfig) -> list[str]:
    """Every violation of the module guards, without running anything heavy."""
    p: list[str] = []
    _guard(p, "grid", lambda: cfg.grid_obj)
    nz = cfg.noise
    if nz.mollifier not in ("gaussian", "sharp", "none"):
        p.append(f"noise.mollifier must be gaussian, sharp or none, got {nz.mollifier!r}")
    elif nz.mollifier != "none":
        _guard(p, "noise", cfg.mollifier)
        if not nz.delta > 0:
            p.append(f"noise.delta must be positive, got {nz.delta}")
    if nz.seed < 0:
        p.append(f"noise.seed must be nonnegative, got {nz.seed}")
    for key in ("M", "N"):
        v = getattr(cfg.cutoffs, key)
        if v != "auto":
            try:
                top = cfg.grid_obj.max_block
            except ValueError:
                top = None
            if v < 0 or (top is not None and v > top):
                p.append(f"cutoffs.{key} must be 'auto' or an integer in [0, {top}], got {v}")
    _guard(p, "potential", cfg.potential_spec)
    if cfg.potential.kind == "bounded_custom":
        p.append("potential.kind bounded_custom needs a field and is not available from configuration")
    ev = cfg.evolve
    if ev.scheme not in D.SCHEMES:
        p.append(f"evolve.scheme must be one of {D.SCHEMES}, got {ev.scheme!r}")
    if not ev.dt > 0:
        p.append(f"evolve.dt must be positive, got {ev.dt}")
    if not ev.T >= 0:
        p.append(f"evolve.T must be nonnegative, got {ev.T}")
    elif ev.dt > 0:
        steps = round(ev.T / ev.dt)
        if abs(steps * ev.dt - ev.T) > 1e-9 * max(ev.T, 1.0):
            p.append(f"evolve.T = {ev.T} is not a multiple of evolve.dt = {ev.dt}")
    if ev.snapshot_stride < 0:
        p.append(f"evolve.snapshot_stride must be nonnegative, got {ev.snapshot_stride}")
    mb = cfg.manybody
    if not mb.N_list or any(N < 1 for N in mb.N_list):
        p.append(f"manybody.N_list must hold positive integers, got {mb.N_list}")
    if not mb.delta_list or any(not d > 0 for d in mb.delta_list):
        p.append(f"manybody.delta_list must hold positive scales, got {mb.delta_list}")
    try:
        mg = Grid(cfg.grid.d, mb.n)
        for N in mb.N_list:
            if N >= 1:
                _guard(p, f"manybody N={N}", lambda N=N: MB.check_feasible(N, mg))
    except ValueError as exc:
        p.append(f"manybody.n: {exc}")
    if not mb.dt > 0:
        p.append(f"manybody.dt must be positive, got {mb.dt}")
    if not mb.T >= 0:
        p.append(f"manybody.T must be nonnegative, got {mb.T}")
    if mb.amplitude < 0:
        p.append(f"manybody.amplitude must be nonnegative, got {mb.amplitude}")
    pr = cfg.probes
    for q, r in pr.strichartz_pairs:
        _guard(p, f"probes pair {q}:{r}", lambda q=q, r=r: D.ProbeSpec(q=q, r=r, samples=max(pr.samples, 1)))
    if pr.samples < 1:
        p.append(f"probes.samples must be positive, got {pr.samples}")
    if any(not g > 0 for g in pr.heat_gammas):
        p.append(f"probes.heat_gammas must be positive, got {pr.heat_gammas}")
    bad = [f for f in cfg.output.formats if f not in FORMATS]
    if bad or not cfg.output.formats:
        p.append(f"output.formats must be a non-empty subset of {FORMATS}, got {cfg.output.formats}")
    return p


def load_config(path: str | os.PathLike | None) -> ExperimentConfig:
    if path is None:
        return parse_config("")
    return parse_config(Path(path).read_text())


# ---------------------------------------------------------------------------
# export and import


def _num(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        x = float(v)
        if math.isnan(x):
            return "NaN"
        if math.isinf(x):
            return "Infinity" if x > 0 else "-Infinity"
        return _fmt_float(x)
    return json.dumps(v)


def _cell(v: Any) -> str:
    s = _num(v)
    return s[1:-1] if s.startswith('"') else s


def export(records: Iterable[dict], path: str | os.PathLike, fmt: str, columns: Sequence[str] | None = None) -> Path:
    """Write records as JSON lines or delimiter-separated values, 17 significant digits.

    For dsv the header is the given column list (extra keys of the first
    record follow in their own order); an empty record list gives a
    header-only file.
    """
    if fmt not in FORMATS:
        raise ValueError(f"unknown export format {fmt!r}")
    records = list(records)
    path = Path(path)
    try:
        with open(path, "w", newline="\n") as fh:
            if fmt == "jsonlines":
                for rec in records:
                    fh.write("{" + ", ".join(f"{json.dumps(k)}: {_num(v)}" for k, v in rec.items()) + "}\n")
            else:
                cols = list(columns or (records[0].keys() if records else ()))
                if records:
                    cols += [k for k in records[0] if k not in cols]
                fh.write(DSV_SEP.join(cols) + "\n")
                for rec in records:
                    fh.write(DSV_SEP.join(_cell(rec.get(c, float("nan"))) for c in cols) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return path


def _parse_cell(s: str) -> Any:
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        return s


def import_records(path: str | os.PathLike, fmt: str) -> list[dict]:
    path = Path(path)
    text = path.read_text()
    if fmt == "jsonlines":
        return [json.loads(line) for line in text.splitlines() if line.strip()]
    if fmt != "dsv":
        raise ValueError(f"unknown export format {fmt!r}")
    lines = text.splitlines()
    if not lines:
        return []
    cols = lines[0].split(DSV_SEP)
    return [dict(zip(cols, (_parse_cell(c) for c in line.split(DSV_SEP)))) for line in lines[1:]]


def report_from_record(rec: dict) -> D.ObservableReport:
    besov = {k[len("besov_") :]: float(v) for k, v in rec.items() if k.startswith("besov_")}
    return D.ObservableReport(*(float(rec[c]) for c in REPORT_COLUMNS), besov=besov)


# ---------------------------------------------------------------------------
# manifest


@dataclass
class RunManifest:
    subcommand: str
    config_hash: str
    version: str
    stages: list[dict] = field(default_factory=list)
    files: dict[str, str] = field(default_factory=dict)
    cache: dict[str, Any] = field(default_factory=lambda: {"hits": 0, "misses": 0, "events": []})
    warnings: list[str] = field(default_factory=list)
    checks: list[dict] = field(default_factory=list)
    status: str = "running"

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True, default=str)

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        return cls(**json.loads(text))


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    """One invocation: output directory, manifest, stage timing and cache access."""

    MANIFEST = "manifest.json"

    def __init__(self, subcommand: str, cfg: ExperimentConfig, out: str | os.PathLike, threads: int = 1, cache_dir: str | None = None):
        self.cfg = cfg
        self.out = Path(out)
        self.threads = max(1, int(threads))
        self.manifest = RunManifest(subcommand, cfg.digest(), toolkit_version())
        cache_dir = cache_dir if cache_dir is not None else os.environ.get(CACHE_ENV)
        self.cache = Path(cache_dir) if cache_dir else None
        self._ench: Enhancement | None = None
        self._ctx: A.OperatorContext | None = None

    # stages -----------------------------------------------------------------
    def stage(self, name: str, fn: Callable[[], Any]) -> Any:
        t0 = time.perf_counter()
        entry = {"name": name, "seconds": 0.0, "status": "running"}
        self.manifest.stages.append(entry)
        try:
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always")
                result = fn()
            for w in caught:
                self.manifest.warnings.append(f"{name}: {w.message}")
        except Exception as exc:
            entry["status"] = f"failed: {type(exc).__name__}: {exc}"
            entry["seconds"] = time.perf_counter() - t0
            raise
        entry["status"] = "ok"
        entry["seconds"] = time.perf_counter() - t0
        return result

    def path(self, name: str) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        return self.out / name

    def export(self, records: list[dict], stem: str, columns: Sequence[str]) -> None:
        for fmt in self.cfg.output.formats:
            ext = "jsonl" if fmt == "jsonlines" else "tsv"
            export(records, self.path(f"{stem}.{ext}"), fmt, columns)

    def finish(self, status: str) -> RunManifest:
        self.manifest.status = status
        if self.out.exists():
            files = sorted(p for p in self.out.rglob("*") if p.is_file() and p.name != self.MANIFEST)
            self.manifest.files = {str(p.relative_to(self.out)): sha256_file(p) for p in files}
        self.path(self.MANIFEST).write_text(self.manifest.to_json())
        return self.manifest

    # cache --------------------------------------------------------------------
    def _cache_key(self, *parts: Any) -> str:
        return hashlib.sha256(repr((toolkit_version(),) + parts).encode()).hexdigest()[:32]

    def _cache_event(self, kind: str, key: str, hit: bool) -> None:
        self.manifest.cache["hits" if hit else "misses"] += 1
        self.manifest.cache["events"].append({"kind": kind, "key": key, "hit": hit})

    def enhancement(self) -> Enhancement:
        if self._ench is not None:
            return self._ench
        cfg = self.cfg
        g = cfg.grid_obj
        if cfg.zero_noise:
            self._ench = Enhancement.zero(g)
            return self._ench
        key = self._cache_key("enhancement", g, cfg.noise.seed, cfg.noise.mollifier, cfg.noise.delta)
        f = self.cache / f"enh-{key}.npz" if self.cache else None
        if f is not None and f.exists():
            self._ench = _load_enhancement(f)
            self._cache_event("enhancement", key, True)
        else:
            self._ench = enhance_from_seed(cfg.noise.seed, g, cfg.mollifier())
            if f is not None:
                self.cache.mkdir(parents=True, exist_ok=True)
                _save_enhancement(f, self._ench)
                self._cache_event("enhancement", key, False)
        return self._ench

    def context(self) -> A.OperatorContext:
        """Calibrated context with its factorization, from the cache when possible."""
        if self._ctx is not None:
            return self._ctx
        ench = self.enhancement()
        cut = self.cfg.cutoffs
        key = self._cache_key("context", ench.content_hash(), cut.M, cut.N)
        f = self.cache / f"ctx-{key}.npz" if self.cache else None
        if f is not None and f.exists():
            with np.load(f) as z:
                ctx = A.OperatorContext(ench, int(z["M"]), int(z["N"]), float(z["K"]))
                ctx.set_factorization(A.Factorization(z["evals"], z["evecs"], z["matrix"], float(z["asymmetry"])))
                vecs = {gg: z[f"gauge_{gg}"] for gg in A.GAUGES if f"gauge_{gg}" in z.files}
            ctx.__dict__["_gauge_vecs"] = vecs
            self._cache_event("factorization", key, True)
        else:
            M = None if cut.M == "auto" else int(cut.M)
            N = None if cut.N == "auto" else int(cut.N)
            ctx = A.calibrate(ench, M=M, N=N)
            if M is not None or N is not None:
                self._contraction_check(ctx)
            ctx.factorization()
            if f is not None:
                self._cache_event("factorization", key, False)
        self._ctx = ctx
        self._ctx_file = f
        return ctx

    def _contraction_check(self, ctx: A.OperatorContext) -> None:
        qt, qg = ctx.theta_contraction(), ctx.gamma_contraction()
        for name, q in (("Theta", qt), ("Gamma", qg)):
            if q > ctx.tol.contraction:
                msg = f"explicit cutoffs M={ctx.M}, N={ctx.N}: {name} contraction factor {q:.3g} exceeds {ctx.tol.contraction}"
                warnings.warn(msg, RuntimeWarning, stacklevel=2)

    def store_context(self) -> None:
        """Write the factorization and every computed gauge basis to the cache."""
        ctx, f = self._ctx, getattr(self, "_ctx_file", None)
        if ctx is None or f is None:
            return
        fac = ctx.factorization()
        arrays = {"M": ctx.M, "N": ctx.N, "K": ctx.K, "evals": fac.evals, "evecs": fac.evecs, "matrix": fac.matrix, "asymmetry": fac.asymmetry}
        for gg, v in ctx.__dict__.get("_gauge_vecs", {}).items():
            arrays[f"gauge_{gg}"] = v
        self.cache.mkdir(parents=True, exist_ok=True)
        tmp = f.with_suffix(".tmp.npz")
        np.savez(tmp, **arrays)
        os.replace(tmp, f)

    def pool_map(self, fn: Callable, items: Sequence) -> list:
        if self.threads == 1 or len(items) < 2:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(self.threads) as ex:
            return list(ex.map(fn, items))


def _save_enhancement(path: Path, e: Enhancement) -> None:
    arrays = {name: f.coef for name, f in e.components().items()}
    meta = [e.c1, e.c2, e.delta, e.M, -1 if e.seed is None else e.seed, e.grid.d, e.grid.n]
    tmp = path.with_suffix(".tmp.npz")
    np.savez(tmp, meta=np.array(meta, dtype=float), kind=np.array(e.mollifier.kind), **arrays)
    os.replace(tmp, path)


def _load_enhancement(path: Path) -> Enhancement:
    with np.load(path) as z:
        c1, c2, delta, M, seed, d, n = z["meta"]
        g = Grid(int(d), int(n))
        f = {k: Field(g, z[k], True) for k in z.files if k not in ("meta", "kind")}
        kind = str(z["kind"])
    R1 = tuple(f[f"R1_{a}"] for a in range(g.d))
    return Enhancement(f["X"], f["X2"], f["X3"], f["W"], f["Z"], R1, f["R2"], float(c1), float(c2), float(delta), int(M), None if seed < 0 else int(seed), f["xi_delta"], MollifierSpec(kind, float(delta)))


# ---------------------------------------------------------------------------
# subcommands


def _initial_state(cfg: ExperimentConfig) -> A.WaveState:
    ev = cfg.evolve
    u = Field.random(cfg.grid_obj, np.random.default_rng(ev.initial_seed), real=False, decay=ev.initial_decay)
    return A.WaveState(u * (1.0 / u.norm()), 0.0, "physical", ev.defocusing)


def cmd_enhance(run: Run) -> None:
    ench = run.stage("enhance", run.enhancement)
    with open(run.path("enhancement.bin"), "wb") as fh:
        for name, f in sorted(ench.components().items()):
            write_field(fh, f)
    summary = {"c1": ench.c1, "c2": ench.c2, "delta": ench.delta, "M": ench.M, "content_hash": ench.content_hash()}
    run.export([summary], "enhancement", ("c1", "c2", "delta", "M", "content_hash"))


def cmd_spectrum(run: Run) -> None:
    ctx = run.stage("calibrate", run.context)
    fac = run.stage("factorize", ctx.factorization)
    run.stage("cache", run.store_context)
    rows = []
    for i, lam in enumerate(fac.evals):
        v = fac.evecs[:, i]
        res = float(np.linalg.norm(-fac.matrix @ v - lam * v))
        rows.append({"index": i, "eigenvalue": float(lam), "residual": res})
    run.export(rows, "spectrum", SPECTRUM_COLUMNS)
    run.export([{"M": ctx.M, "N": ctx.N, "K": ctx.K, "asymmetry": fac.asymmetry}], "calibration", ("M", "N", "K", "asymmetry"))


def cmd_evolve(run: Run) -> None:
    cfg = run.cfg
    ctx = run.stage("calibrate", run.context)
    run.stage("factorize", ctx.factorization)
    V = D.synthesize_potential(cfg.potential_spec(), cfg.grid_obj)
    u0 = _initial_state(cfg)
    ev = cfg.evolve
    stride = ev.snapshot_stride
    tr = run.stage("evolve", lambda: D.evolve(u0, ev.T, ev.dt, ev.scheme, ctx, V, observe_every=stride, keep_every=stride))
    if ev.scheme == "mild_exponential":
        run.stage("gauges", lambda: ctx.gauge_eigenvectors("sharp"))
    run.stage("cache", run.store_context)
    run.export([r.record() for r in tr.reports], "observables", REPORT_COLUMNS)
    with open(run.path("snapshots.bin"), "wb") as fh:
        for s in tr.states:
            write_field(fh, s.field)
    run.export([{"t": s.time, "gauge": s.gauge} for s in tr.states], "snapshots", ("t", "gauge"))


def cmd_probe(run: Run) -> None:
    cfg = run.cfg
    ctx = run.stage("calibrate", run.context)
    run.stage("factorize", ctx.factorization)
    run.stage("gauges", lambda: ctx.gauge_eigenvectors("sharp"))
    specs = cfg.probe_specs()

    def strichartz(spec):
        res = D.strichartz_probe(ctx, spec)
        return {"kind": "strichartz", "q": spec.q, "r": spec.r, "gamma": float("nan"), "max": res.max, "median": res.median, "slope": float("nan")}

    def heat(gamma):
        res = D.heat_probe(ctx, gamma)
        return {"kind": "heat", "q": float("nan"), "r": float("nan"), "gamma": gamma, "max": float(res.norms.max()), "median": float(np.median(res.norms)), "slope": res.slope}

    rows = run.stage("strichartz", lambda: run.pool_map(strichartz, specs))
    rows += run.stage("heat", lambda: run.pool_map(heat, cfg.probes.heat_gammas))
    run.stage("cache", run.store_context)
    run.export(rows, "probes", PROBE_COLUMNS)


def _manybody_setup(cfg: ExperimentConfig, delta: float):
    g = Grid(cfg.grid.d, cfg.manybody.n)
    if cfg.zero_noise:
        ctx = MB.ManyBodyContext.free(g)
    else:
        ctx = MB.ManyBodyContext.from_seed(cfg.noise.seed, g, MollifierSpec(cfg.noise.mollifier, delta))
    V = checks.bounded_potential(g, cfg.manybody.amplitude) if g.d == 3 else None
    rng = np.random.default_rng(cfg.evolve.initial_seed)
    u = rng.standard_normal(g.size) + 1j * rng.standard_normal(g.size)
    return g, ctx, V, u


def cmd_manybody(run: Run) -> None:
    cfg = run.cfg
    mb = cfg.manybody
    rows = []
    for delta in mb.delta_list:
        g, ctx, V, u = run.stage(f"setup delta={delta}", lambda: _manybody_setup(cfg, delta))
        us = run.stage(f"hartree delta={delta}", lambda: MB.hartree_trajectory(u, mb.T, mb.dt, ctx, V))
        pure1 = [MB.DensityMatrix(1, g, kernel=np.outer(x, x.conj())) for x in us]
        pure2 = [MB.DensityMatrix.pure(np.multiply.outer(x, x), 2, g) for x in us]
        bbgky = float(MB.bbgky_residual(pure1, pure2, ctx, V, mb.dt).max()) if V is not None else float("nan")
        for N in mb.N_list:
            psi0 = MB.ManyBodyState.product(u, N, g, ctx.delta)
            tr = run.stage(f"manybody N={N} delta={delta}", lambda: MB.evolve_manybody(psi0, mb.T, mb.dt, ctx, V, marginal_n=1))
            dist = 0.0
            for rho, x in zip(tr.marginals, us):
                diff = rho - MB.DensityMatrix.pure(x, 1, g)
                dist = max(dist, MB.trace_norm(MB.DensityMatrix(1, g, kernel=diff.kernel_array())))
            E = np.array(tr.energy)
            drift = float(np.max(np.abs(E - E[0])) / max(abs(E[0]), 1e-300)) if E.size else float("nan")
            rows.append({"N": N, "delta": delta, "grid": g.n, "T": mb.T, "sup_trace_distance": dist, "final_mass": float(tr.mass[-1]), "energy_drift": drift, "bbgky_residual": bbgky})
            with open(run.path(f"marginal_N{N}_delta{delta:g}.bin"), "wb") as fh:
                write_kernel(fh, g, tr.marginals[-1].kernel_array(), 1)
    run.export(rows, "manybody", MANYBODY_COLUMNS)


def cmd_convergence(run: Run) -> None:
    cfg = run.cfg
    mb = cfg.manybody
    setups = run.stage("setup", lambda: [_manybody_setup(cfg, d) for d in mb.delta_list])
    u = setups[0][3]

    def one(item):
        (_, ctx, V, _), N = item
        return MB.convergence_study([N], [ctx], u, V, mb.T, mb.dt)[0]

    items = [(s, N) for s in setups for N in mb.N_list]
    rows = run.stage("convergence", lambda: run.pool_map(one, items))
    run.export([dict(zip(CONVERGENCE_COLUMNS, r.values())) for r in rows], "convergence", CONVERGENCE_COLUMNS)


def cmd_verify(run: Run, tier: str, report: Callable[[str], None] | None = print) -> bool:
    results = run.stage(f"verify {tier}", lambda: checks.run_battery(tier, report))
    for r in results:
        run.manifest.checks.append({"name": r.name, "passed": r.passed, "seconds": r.seconds, "values": r.values})
    rows = [{"name": r.name, "passed": r.passed, "seconds": r.seconds} for r in results]
    run.export(rows, "verify", ("name", "passed", "seconds"))
    return all(r.passed for r in results)


def run_subcommand(subcommand: str, cfg: ExperimentConfig, out: str | os.PathLike, tier: str = "fast", threads: int = 1, report: Callable[[str], None] | None = print) -> tuple[RunManifest, bool]:
    """Run one subcommand and write its manifest; returns (manifest, all checks passed)."""
    if subcommand not in SUBCOMMANDS:
        raise ValueError(f"unknown subcommand {subcommand!r}")
    set_fft_workers(threads)
    run = Run(subcommand, cfg, out, threads)
    ok = True
    try:
        if subcommand == "verify":
            ok = cmd_verify(run, tier, report)
        else:
            globals()[f"cmd_{subcommand}"](run)
    except BaseException:
        run.finish("failed")
        raise
    return run.finish("ok" if ok else "checks failed"), ok


# ---------------------------------------------------------------------------
# CLI


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="anls", description="Anderson Hamiltonian, stochastic Hartree NLS and mean-field toolkit")
    ap.add_argument("subcommand", choices=SUBCOMMANDS)
    ap.add_argument("--config", help="key-value configuration file (defaults apply when omitted)")
    ap.add_argument("--out", help="output directory (default: output.directory/<subcommand>)")
    ap.add_argument("--seed", type=int, help="override noise.seed")
    ap.add_argument("--tier", choices=("fast", "full"), default="fast", help="verification tier")
    ap.add_argument("--threads", type=int, default=1, help="FFT threads and parallel ensemble members")
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.noise.seed = args.seed
            problems = validate(cfg)
            if problems:
                raise ConfigError(problems)
    except ConfigError as exc:
        for p in exc.problems:
            print(f"config error: {p}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"cannot read configuration: {exc}", file=sys.stderr)
        return 2
    out = args.out or os.path.join(cfg.output.directory, args.subcommand)
    try:
        manifest, ok = run_subcommand(args.subcommand, cfg, out, args.tier, args.threads)
    except Exception as exc:
        print(f"{args.subcommand} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    for w in manifest.warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(f"{args.subcommand}: {manifest.status}; manifest in {Path(out) / Run.MANIFEST}")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
