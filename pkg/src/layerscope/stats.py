"""Hypothesis tests, the normative database and a synthetic-population harness.

P-values come from the regularized incomplete beta function evaluated by a
continued fraction, so the module needs nothing beyond numpy.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .thickness import TOTAL

BETA_RTOL = 1e-10
_TINY = 1e-300
_MAX_CF_ITER = 100_000

LAYER_KEYS = tuple(range(1, 12)) + (TOTAL,)
SECTORS = tuple(range(1, 10))


class StatsError(ValueError):
    pass


# -- distributions ---------------------------------------------------------


def _beta_cf(a: float, b: float, x: float) -> float:
    # modified Lentz evaluation of the incomplete beta continued fraction
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > _TINY else _TINY)
    h = d
    for m in range(1, _MAX_CF_ITER):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > _TINY else _TINY)
        c = 1.0 + aa / c
        c = c if abs(c) > _TINY else _TINY
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > _TINY else _TINY)
        c = 1.0 + aa / c
        c = c if abs(c) > _TINY else _TINY
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < BETA_RTOL * 1e-3:
            return h
    raise ArithmeticError(f"incomplete beta did not converge (a={a}, b={b}, x={x})")


def betainc_reg(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta ``I_x(a, b)``."""
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be positive")
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x must lie in [0, 1], got {x}")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _beta_cf(a, b, x) / a
    return 1.0 - math.exp(log_front) * _beta_cf(b, a, 1.0 - x) / b


def t_sf2(t: float, df: float) -> float:
    """Two-sided tail probability ``P(|T| >= |t|)``."""
    if math.isinf(t):
        return 0.0
    t2 = t * t
    if t2 < df:
        # complementary form keeps precision for small |t|
        return 1.0 - betainc_reg(0.5, df / 2.0, t2 / (df + t2))
    return min(1.0, betainc_reg(df / 2.0, 0.5, df / (df + t2)))


def t_cdf(t: float, df: float) -> float:
    half = 0.5 * t_sf2(t, df)
    return 1.0 - half if t > 0 else half


def f_sf(f: float, d1: float, d2: float) -> float:
    if f <= 0:
        return 1.0
    if math.isinf(f):
        return 0.0
    if d1 * f < d2:
        return 1.0 - betainc_reg(d1 / 2.0, d2 / 2.0, d1 * f / (d2 + d1 * f))
    return betainc_reg(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * f))


def f_cdf(f: float, d1: float, d2: float) -> float:
    return 1.0 - f_sf(f, d1, d2)


# -- tests -----------------------------------------------------------------


@dataclass(frozen=True)
class TestResult:
    """Outcome of a two-sided test.

    ``direction`` is the sign of the effect (b - a for t-tests, the slope for
    regressions, 0 for ANOVA).
    """

    __test__ = False  # not a pytest class

    statistic: float
    df: tuple
    p_value: float
    direction: int
    estimate: float | None = None
    std_error: float | None = None
    ci95: tuple | None = None
    flags: tuple = ()


def _clean(values, name, min_n=2):
    v = np.asarray(values, dtype=float).ravel()
    if len(v) < min_n:
        raise StatsError(f"{name} needs at least {min_n} values, got {len(v)}")
    if not np.all(np.isfinite(v)):
        raise StatsError(f"{name} contains non-finite values")
    return v


def _ss(v):
    m = math.fsum(v) / len(v)
    return m, math.fsum((v - m) ** 2)


def anova_oneway(groups) -> TestResult:
    """One-way ANOVA F test over two or more groups."""
    groups = [_clean(g, f"group {i}") for i, g in enumerate(groups)]
    if len(groups) < 2:
        raise StatsError("need at least two groups")
    n = sum(len(g) for g in groups)
    k = len(groups)
    grand = math.fsum(math.fsum(g) for g in groups) / n
    ssb = math.fsum(len(g) * (math.fsum(g) / len(g) - grand) ** 2 for g in groups)
    ssw = math.fsum(_ss(g)[1] for g in groups)
    d1, d2 = k - 1, n - k
    if ssw == 0:
        if ssb == 0:
            raise StatsError("F undefined: no variance within or between groups")
        return TestResult(math.inf, (d1, d2), 0.0, 0, flags=("zero_within_variance",))
    f = (ssb / d1) / (ssw / d2)
    return TestResult(f, (d1, d2), f_sf(f, d1, d2), 0)


def ttest_unpaired(a, b, welch: bool = False) -> TestResult:
    """Two-sample t test of ``mean(a) - mean(b)``; pooled variance unless ``welch``."""
    a = _clean(a, "a")
    b = _clean(b, "b")
    na, nb = len(a), len(b)
    ma, ssa = _ss(a)
    mb, ssb = _ss(b)
    diff = ma - mb
    if welch:
        va, vb = ssa / (na - 1) / na, ssb / (nb - 1) / nb
        se2 = va + vb
        df = se2 ** 2 / (va ** 2 / (na - 1) + vb ** 2 / (nb - 1)) if se2 > 0 else na + nb - 2
    else:
        df = na + nb - 2
        se2 = (ssa + ssb) / df * (1.0 / na + 1.0 / nb)
    if se2 == 0:
        if diff == 0:
            raise StatsError("t undefined: both samples constant and equal")
        t = math.copysign(math.inf, diff)
        return TestResult(t, (df,), 0.0, int(np.sign(-diff)), diff, 0.0,
                          flags=("zero_variance",))
    t = diff / math.sqrt(se2)
    return TestResult(t, (df,), t_sf2(t, df), int(np.sign(-diff)), diff, math.sqrt(se2))


def t_quantile(p: float, df: float) -> float:
    """Inverse of :func:`t_cdf` by bisection (used for confidence intervals)."""
    if not 0 < p < 1:
        raise ValueError("p must lie in (0, 1)")
    lo, hi = -1.0, 1.0
    while t_cdf(lo, df) > p:
        lo *= 2
    while t_cdf(hi, df) < p:
        hi *= 2
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if t_cdf(mid, df) < p:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-12 * max(1.0, abs(mid)):
            break
    return 0.5 * (lo + hi)


def slope_test(x, y) -> TestResult:
    """Least-squares slope of ``y`` on ``x`` tested against zero."""
    x = _clean(x, "x", 3)
    y = _clean(y, "y", 3)
    if len(x) != len(y):
        raise StatsError("x and y differ in length")
    n = len(x)
    mx, sxx = _ss(x)
    if sxx == 0:
        raise StatsError("degenerate x: all values equal")
    my = math.fsum(y) / n
    sxy = math.fsum((x - mx) * (y - my))
    slope = sxy / sxx
    intercept = my - slope * mx
    resid = y - (intercept + slope * x)
    sse = math.fsum(resid ** 2)
    df = n - 2
    se = math.sqrt(sse / df / sxx)
    # relative tolerance for a perfect fit
    if se <= 1e-14 * max(abs(slope), 1e-300) or sse == 0:
        if slope == 0 or abs(slope) * math.sqrt(sxx) <= 1e-12 * (abs(my) + 1):
            return TestResult(0.0, (df,), 1.0, 0, 0.0, 0.0, (0.0, 0.0), flags=("constant_y",))
        return TestResult(math.copysign(math.inf, slope), (df,), 0.0, int(np.sign(slope)),
                          slope, 0.0, (slope, slope), flags=("perfect_fit",))
    t = slope / se
    q = t_quantile(0.975, df)
    return TestResult(t, (df,), t_sf2(t, df), int(np.sign(slope)), slope, se,
                      (slope - q * se, slope + q * se))


# -- normative database ----------------------------------------------------


def _layer_key(v):
    if v == TOTAL:
        return TOTAL
    if isinstance(v, bool) or not isinstance(v, (int, str)):
        raise StatsError(f"bad layer key {v!r}")
    iv = int(v)
    if not 1 <= iv <= 11:
        raise StatsError(f"layer out of range: {v!r}")
    return iv


def _layer_sort(key):
    return 12 if key == TOTAL else key


@dataclass(frozen=True, eq=False)
class NormativeTable:
    """Population mean and SD per ``(layer, sector)``.

    ``kind`` is ``"thickness"`` for mean thickness tables or
    ``"intra_sector_sd"`` for tables summarising within-sector SDs.
    """

    cells: dict  # (layer, sector) -> (mean, sd)
    source: str = ""
    instrument: str = ""
    kind: str = "thickness"
    note: str = ""
    n_subjects: int | None = None

    def __post_init__(self):
        layers = {k[0] for k in self.cells}
        for (layer, sector), (mean, sd) in self.cells.items():
            if sector not in SECTORS:
                raise StatsError(f"sector out of range: {sector}")
            if not (math.isfinite(mean) and math.isfinite(sd)) or sd < 0:
                raise StatsError(f"bad cell ({layer}, {sector}): mean={mean}, sd={sd}")
        for layer in layers:
            missing = [s for s in SECTORS if (layer, s) not in self.cells]
            if missing:
                raise StatsError(f"layer {layer} lacks sectors {missing}")
        if not layers:
            raise StatsError("normative table has no cells")

    @property
    def layers(self):
        return sorted({k[0] for k in self.cells}, key=_layer_sort)

    def get(self, layer, sector):
        return self.cells[(layer, sector)]

    def to_dict(self) -> dict:
        out = {"source": self.source, "units": "um", "kind": self.kind,
               "instrument": self.instrument}
        if self.note:
            out["note"] = self.note
        if self.n_subjects is not None:
            out["n_subjects"] = self.n_subjects
        out["cells"] = [
            {"layer": layer, "sector": sector,
             "mean": float(self.cells[(layer, sector)][0]),
             "sd": float(self.cells[(layer, sector)][1])}
            for layer in self.layers for sector in SECTORS
        ]
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, ensure_ascii=True) + "\n"

    def dump(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="ascii")

    @classmethod
    def from_dict(cls, payload) -> "NormativeTable":
        if not isinstance(payload, dict):
            raise StatsError("normative table must be a JSON object")
        for key in ("source", "units", "cells"):
            if key not in payload:
                raise StatsError(f"missing field {key!r}")
        if payload["units"] != "um":
            raise StatsError(f"units must be 'um', got {payload['units']!r}")
        cells = {}
        for entry in payload["cells"]:
            try:
                layer = _layer_key(entry["layer"])
                sector = int(entry["sector"])
                mean, sd = float(entry["mean"]), float(entry["sd"])
            except (KeyError, TypeError, ValueError) as exc:
                raise StatsError(f"malformed cell {entry!r}") from exc
            if (layer, sector) in cells:
                raise StatsError(f"duplicate cell ({layer}, {sector})")
            cells[(layer, sector)] = (mean, sd)
        return cls(cells, source=str(payload["source"]),
                   instrument=str(payload.get("instrument", "")),
                   kind=str(payload.get("kind", "thickness")),
                   note=str(payload.get("note", "")),
                   n_subjects=payload.get("n_subjects"))

    @classmethod
    def loads(cls, text: str) -> "NormativeTable":
        try:
            payload = json.loads(text)
        except json.JSONDecodeError as exc:
            raise StatsError(f"invalid JSON: {exc}") from exc
        return cls.from_dict(payload)

    @classmethod
    def load(cls, path) -> "NormativeTable":
        return cls.loads(Path(path).read_text(encoding="utf-8"))


FIXTURES = {
    "table1": "table1_intra_sector_sd.json",
    "table2_spectralis": "table2_spectralis.json",
    "table2_spectralis_hra": "table2_spectralis_hra.json",
    "table2_cirrus": "table2_cirrus.json",
    "table2_rtvue100": "table2_rtvue100.json",
    "table2_topcon_a": "table2_topcon_a.json",
    "table2_topcon_b": "table2_topcon_b.json",
    "table2_stratus": "table2_stratus.json",
}


def fixture_path(name: str = "table2_spectralis") -> Path:
    if name not in FIXTURES:
        raise KeyError(f"unknown fixture {name!r}; choose from {sorted(FIXTURES)}")
    return Path(str(resources.files("layerscope") / "data" / FIXTURES[name]))


def load_fixture(name: str = "table2_spectralis") -> NormativeTable:
    return NormativeTable.load(fixture_path(name))


def population_aggregate(per_subject_stats, variant: str = "mean", source: str = "",
                         instrument: str = "") -> NormativeTable:
    """Aggregate per-subject sector stats into a normative table.

    ``per_subject_stats`` is a sequence of ``{(layer, sector): SectorStat}``.
    ``variant="mean"`` summarises sector means; ``variant="sd"`` summarises
    intra-sector SDs.  The population SD uses divisor N-1.
    """
    subjects = list(per_subject_stats)
    if len(subjects) < 2:
        raise StatsError(f"need at least 2 subjects, got {len(subjects)}")
    if variant not in ("mean", "sd"):
        raise StatsError("variant must be 'mean' or 'sd'")
    keys = set(subjects[0])
    for i, s in enumerate(subjects[1:], 1):
        if set(s) != keys:
            raise StatsError(f"subject {i} has different (layer, sector) keys")
    cells = {}
    for key in keys:
        vals = np.array([getattr(s[key], variant) for s in subjects], dtype=float)
        m = math.fsum(vals) / len(vals)
        sd = math.sqrt(math.fsum((vals - m) ** 2) / (len(vals) - 1))
        cells[key] = (m, sd)
    kind = "thickness" if variant == "mean" else "intra_sector_sd"
    return NormativeTable(cells, source=source, instrument=instrument, kind=kind,
                          n_subjects=len(subjects))


@dataclass(frozen=True)
class CellComparison:
    value: float
    mean: float
    sd: float
    z: float | None
    status: str  # normal | borderline | outside | not-computable


def compare_to_normative(subject_stats, norm: NormativeTable, z_threshold: float = 2.0,
                         borderline_z: float = 1.5) -> dict:
    """z-score each subject cell against the norm.

    ``|z| <= borderline_z`` is normal, ``|z| <= z_threshold`` borderline and
    anything beyond is outside.  Only cells present in both are compared.
    """
    if not 0 < borderline_z <= z_threshold:
        raise StatsError("need 0 < borderline_z <= z_threshold")
    common = [k for k in subject_stats if k in norm.cells]
    if not common:
        raise StatsError("subject and norm share no (layer, sector) cells")
    out = {}
    for key in sorted(common, key=lambda k: (_layer_sort(k[0]), k[1])):
        st = subject_stats[key]
        value = float(getattr(st, "mean", st))
        mean, sd = norm.cells[key]
        if sd == 0:
            # no spread: only an exact match has a defined (zero) z-score
            if value == mean:
                out[key] = CellComparison(value, mean, sd, 0.0, "normal")
            else:
                out[key] = CellComparison(value, mean, sd, None, "not-computable")
            continue
        z = (value - mean) / sd
        a = abs(z)
        status = "normal" if a <= borderline_z else ("borderline" if a <= z_threshold else "outside")
        out[key] = CellComparison(value, mean, sd, z, status)
    return out


def comparison_to_dict(comparison: dict) -> dict:
    return {"cells": [
        {"layer": k[0], "sector": k[1], "value": c.value, "mean": c.mean, "sd": c.sd,
         "z": c.z, "status": c.status}
        for k, c in comparison.items()
    ]}


def comparison_table(comparison: dict) -> str:
    lines = [f"{'layer':>6} {'sector':>6} {'value':>9} {'mean':>9} {'sd':>7} {'z':>7}  status"]
    for (layer, sector), c in comparison.items():
        z = "n/a" if c.z is None else f"{c.z:7.2f}"
        lines.append(f"{layer!s:>6} {sector:>6} {c.value:9.2f} {c.mean:9.2f} {c.sd:7.2f} {z:>7}  {c.status}")
    return "\n".join(lines) + "\n"


# -- synthetic population --------------------------------------------------


@dataclass(frozen=True)
class PopulationConfig:
    """Synthetic cohort with injected covariate effects.

    ``age_slopes`` and ``sex_offsets`` map layer number to an effect in um/year
    and um respectively.  Between-subject variability per layer is
    ``min(noise_sd_um, rel_cap * nominal thickness)`` so thin layers stay
    resolvable.
    """

    n_subjects: int = 50
    age_range: tuple = (20.0, 80.0)
    reference_age: float = 50.0
    age_slopes: dict = field(default_factory=lambda: {6: -0.5})
    sex_offsets: dict = field(default_factory=dict)
    noise_sd_um: float = 5.0
    rel_cap: float = 0.15
    dims: tuple = (64, 128, 8)
    pit_depth: float = 30.0
    image_noise: float = 0.05
    alpha_effect: float = 0.005
    alpha_null: float = 0.05
    null_pass_fraction: float = 0.90
    seed: int = 0
    threads: int | None = None

    def __post_init__(self):
        if self.n_subjects < 20:
            raise StatsError(f"need at least 20 subjects, got {self.n_subjects}")
        lo, hi = self.age_range
        if not hi > lo:
            raise StatsError("age_range must be increasing")
        if self.noise_sd_um < 0:
            raise StatsError("noise_sd_um must be >= 0")


@dataclass
class Subject:
    index: int
    age: float
    sex: int
    eye: str
    thickness: tuple
    stats: dict = field(default_factory=dict)


@dataclass
class PopulationReport:
    subjects: list
    slope_results: dict  # (layer, sector) -> TestResult
    sex_results: dict
    affected_cells: list
    null_slope_cells: list
    null_sex_cells: list
    effects_recovered: bool
    null_pass_fraction: float
    null_ok: bool
    skipped_cells: list = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return self.effects_recovered and self.null_ok

    def to_dict(self) -> dict:
        def res(r):
            return {"statistic": r.statistic, "df": list(r.df), "p": r.p_value,
                    "estimate": r.estimate, "flags": list(r.flags)}
        return {
            "n_subjects": len(self.subjects),
            "effects_recovered": self.effects_recovered,
            "null_pass_fraction": self.null_pass_fraction,
            "null_ok": self.null_ok,
            "passed": self.passed,
            "seconds": self.seconds,
            "affected": [{"layer": k[0], "sector": k[1], **res(self.slope_results[k])}
                         for k in self.affected_cells],
        }


def _simulate_subject(cfg: PopulationConfig, index: int, seed_seq) -> Subject:
    from .segmentation import PipelineConfig, segment
    from .volume import DEFAULT_THICKNESS_UM, PhantomSpec, generate_phantom
    from .thickness import find_fovea, layer_thickness, sector_grid, sector_stats, total_thickness

    rng = np.random.default_rng(seed_seq)
    age = float(rng.uniform(*cfg.age_range))
    sex = int(rng.integers(2))
    eye = "right" if rng.integers(2) == 0 else "left"
    th = []
    for k, nominal in enumerate(DEFAULT_THICKNESS_UM, start=1):
        sd = min(cfg.noise_sd_um, cfg.rel_cap * nominal)
        v = (nominal + cfg.age_slopes.get(k, 0.0) * (age - cfg.reference_age)
             + cfg.sex_offsets.get(k, 0.0) * sex + sd * rng.standard_normal())
        th.append(max(v, 0.5 * nominal))
    spec = PhantomSpec(dims=tuple(cfg.dims), thicknesses=tuple(th), pit_depth=cfg.pit_depth,
                       rng_seed=int(rng.integers(2 ** 31)))
    spec = replace(spec, noise_sd=cfg.image_noise * spec.contrast)
    vol, _ = generate_phantom(spec)
    surfaces, _ = segment(vol, PipelineConfig(seed=index, threads=1))
    maps = layer_thickness(surfaces.surfaces, vol.axial_scale,
                           (vol.lateral_scale_x, vol.lateral_scale_z))
    maps.append(total_thickness(maps))
    center = find_fovea(maps[0], smooth_radius=(2, 0))
    grid = sector_grid(center, maps[0].shape,
                       lateral_scales=(vol.lateral_scale_x, vol.lateral_scale_z), eye=eye)
    stats = {}
    for m in maps:
        for sector, st in sector_stats(m, grid).items():
            stats[(m.layer, sector)] = st
    return Subject(index, age, sex, eye, tuple(th), stats)


def synthetic_population_check(cfg: PopulationConfig = PopulationConfig()) -> PopulationReport:
    """Simulate a cohort through the full pipeline and test effect recovery."""
    import time

    t0 = time.perf_counter()
    seqs = np.random.SeedSequence(cfg.seed).spawn(cfg.n_subjects)
    workers = cfg.threads or int(os.environ.get("LAYERSCOPE_THREADS", 0)) or min(4, os.cpu_count() or 1)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            subjects = list(pool.map(lambda i: _simulate_subject(cfg, i, seqs[i]),
                                     range(cfg.n_subjects)))
    else:
        subjects = [_simulate_subject(cfg, i, seqs[i]) for i in range(cfg.n_subjects)]
    report = analyse_population(subjects, cfg)
    report.seconds = time.perf_counter() - t0
    return report


def analyse_population(subjects, cfg: PopulationConfig) -> PopulationReport:
    ages = np.array([s.age for s in subjects])
    sexes = np.array([s.sex for s in subjects])
    keys = sorted(subjects[0].stats, key=lambda k: (_layer_sort(k[0]), k[1]))
    slopes, sex_res, skipped = {}, {}, []
    for key in keys:
        if any(s.stats[key].count == 0 for s in subjects):
            skipped.append(key)
            continue
        y = np.array([s.stats[key].mean for s in subjects], dtype=float)
        slopes[key] = slope_test(ages, y)
        if sexes.min() != sexes.max():
            sex_res[key] = ttest_unpaired(y[sexes == 1], y[sexes == 0])

    aged = {k for k, v in cfg.age_slopes.items() if v != 0}
    sexed = {k for k, v in cfg.sex_offsets.items() if v != 0}
    keys = [k for k in keys if k not in skipped]
    affected = [k for k in keys if k[0] in aged]
    # TOTAL carries any injected layer effect, so it is null only without one
    null_slope = [k for k in keys if k not in affected and (k[0] != TOTAL or not aged)]
    null_sex = [k for k in sex_res if k[0] not in sexed and (k[0] != TOTAL or not sexed)]
    recovered = all(slopes[k].p_value < cfg.alpha_effect
                    and np.sign(slopes[k].estimate) == np.sign(cfg.age_slopes[k[0]])
                    for k in affected)
    null_p = [slopes[k].p_value for k in null_slope] + [sex_res[k].p_value for k in null_sex]
    frac = float(np.mean(np.array(null_p) > cfg.alpha_null)) if null_p else 1.0
    return PopulationReport(subjects, slopes, sex_res, affected, null_slope, null_sex,
                            bool(recovered), frac, frac >= cfg.null_pass_fraction,
                            skipped_cells=skipped)
