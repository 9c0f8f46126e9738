"""Synthetic climate/phenology benchmark with controllable distribution shift.

Each sample is one site-year: a (7, 365) daily meteorological series and up
to S species' phenophase dates. The series spans day-of-year -100 .. 264 of
the labeled year (index 0 of the day axis is day -100), so autumn/winter
forcing preceding a spring event is inside the window. Labels come from a
thermal-time oracle: the day accumulated degrees above a species' base
temperature reach its forcing requirement, plus rounded observation noise.

Shift structure mirrors real phenology monitoring: a linear warming trend
(year shift), shared warm/cold year anomalies (annual-temperature shift),
and an elevation lapse (elevation shift). The three split protocols carve
train/val/test along exactly those axes; `split_random` is the stationary
control.

Channels, in order: tmean, tmin, tmax [degC], precip [mm], pressure [hPa],
daylength [h], noise [unitless].
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

CHANNELS = ("tmean", "tmin", "tmax", "precip", "pressure", "daylength", "noise")
SERIES_LEN = 365
DAY_OFFSET = -100          # series index 0 corresponds to this day-of-year
SEASONAL_PHASE = 98.75     # sinusoid peak at day-of-year ~190 (mid July)


class SplitError(ValueError):
    pass


class CsvFormatError(ValueError):
    pass


@dataclass
class Site:
    id: int
    elevation: float   # meters
    latitude: float    # degrees north

    def __post_init__(self):
        if not 0.0 <= self.elevation <= 4000.0:
            raise ValueError(f"site {self.id}: elevation {self.elevation} outside [0, 4000] m")
        if not -90.0 < self.latitude < 90.0:
            raise ValueError(f"site {self.id}: latitude {self.latitude} outside (-90, 90)")


@dataclass
class SpeciesParams:
    """Thermal-time parameters of one (synthetic) species.

    start_day indexes the series axis (0 = day-of-year -100); defaults start
    accumulating on January 1 (index 101).
    """

    t_base: float          # degC
    f_star: float          # degree-days
    start_day: int = 101
    sigma_obs: float = 2.0

    def __post_init__(self):
        if self.f_star <= 0:
            raise ValueError(f"f_star must be > 0, got {self.f_star}")
        if self.sigma_obs < 0:
            raise ValueError(f"sigma_obs must be >= 0, got {self.sigma_obs}")


@dataclass
class ClimateConfig:
    baseline_temp: float = 11.0        # degC annual mean at sea level
    seasonal_amplitude: float = 9.0    # degC
    warming_per_decade: float = 0.3    # degC / decade
    lapse_per_km: float = -6.5         # degC / km, negative: cooler with altitude
    noise_daily: float = 2.0           # degC daily weather noise
    noise_annual: float = 0.6          # degC shared warm/cold-year anomaly
    noise_site_year: float = 0.3       # degC per-site-year offset
    diurnal_range: float = 8.0         # tmax - tmin spread, degC
    n_sites: int = 40
    elevation_range: tuple = (200.0, 1400.0)
    latitude_range: tuple = (46.0, 47.6)
    year_range: tuple = (1973, 2022)   # inclusive
    missing_rate: float = 0.1
    seed: int = 0

    def validate(self):
        if self.lapse_per_km >= 0:
            raise ValueError(f"lapse_per_km must be < 0, got {self.lapse_per_km}")
        if self.n_sites < 1:
            raise ValueError("n_sites must be >= 1")
        if self.year_range[0] > self.year_range[1]:
            raise ValueError(f"bad year_range {self.year_range}")
        if not 0.0 <= self.missing_rate < 1.0:
            raise ValueError(f"missing_rate must be in [0, 1), got {self.missing_rate}")
        return self


@dataclass
class SampleRecord:
    site_id: int
    year: int
    elevation: float
    latitude: float
    x: np.ndarray      # (7, 365)
    y: np.ndarray      # (S,), NaN where missing

    def __eq__(self, other):
        return (self.site_id == other.site_id and self.year == other.year
                and self.elevation == other.elevation and self.latitude == other.latitude
                and np.array_equal(self.x, other.x)
                and np.array_equal(self.y, other.y, equal_nan=True))


def default_species() -> list[SpeciesParams]:
    """Five parameter sets spanning early to late spring phenology."""
    grid = [(0.0, 100.0), (1.0, 160.0), (2.5, 220.0), (4.0, 300.0), (5.0, 380.0)]
    return [SpeciesParams(t_base=tb, f_star=fs) for tb, fs in grid]


def day_length_hours(latitude_deg: float, day_index: np.ndarray) -> np.ndarray:
    """Daylight hours from the standard solar-declination formula."""
    doy = np.mod(np.asarray(day_index) + DAY_OFFSET, 365)
    decl = np.deg2rad(23.44) * np.sin(2.0 * np.pi * (284.0 + doy) / 365.0)
    lat = np.deg2rad(latitude_deg)
    cos_h = np.clip(-np.tan(lat) * np.tan(decl), -1.0, 1.0)
    return 24.0 * np.arccos(cos_h) / np.pi


def generate_sites(cfg: ClimateConfig, seed: int | None = None) -> list[Site]:
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x517E5]))
    lo, hi = cfg.elevation_range
    la, lb = cfg.latitude_range
    elev = rng.uniform(lo, hi, cfg.n_sites)
    lat = rng.uniform(la, lb, cfg.n_sites)
    return [Site(i, float(elev[i]), float(lat[i])) for i in range(cfg.n_sites)]


def generate_climate(site: Site, year: int, cfg: ClimateConfig,
                     seed: int | None = None) -> np.ndarray:
    """One site-year's (7, 365) series, deterministic in (seed, site, year)."""
    seed = cfg.seed if seed is None else seed
    y0, y1 = cfg.year_range
    if not y0 <= year <= y1:
        raise ValueError(f"year {year} outside configured range {cfg.year_range}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, site.id, year]))
    # the annual anomaly is shared by every site in a given year
    anomaly_rng = np.random.default_rng(np.random.SeedSequence([seed, 0x59EA0, year]))
    annual = anomaly_rng.normal(0.0, cfg.noise_annual) if cfg.noise_annual > 0 else 0.0

    idx = np.arange(SERIES_LEN)
    doy = idx + DAY_OFFSET
    seasonal = cfg.seasonal_amplitude * np.sin(2.0 * np.pi * (doy - SEASONAL_PHASE) / 365.0)
    base = (cfg.baseline_temp + seasonal
            + cfg.warming_per_decade * (year - y0) / 10.0
            + cfg.lapse_per_km * site.elevation / 1000.0
            + annual
            + (rng.normal(0.0, cfg.noise_site_year) if cfg.noise_site_year > 0 else 0.0))
    tmean = base + rng.normal(0.0, cfg.noise_daily, SERIES_LEN)
    tmin = tmean - cfg.diurnal_range / 2.0 + rng.normal(0.0, 0.5, SERIES_LEN)
    tmax = tmean + cfg.diurnal_range / 2.0 + rng.normal(0.0, 0.5, SERIES_LEN)
    precip = rng.gamma(2.0, 2.0, SERIES_LEN)
    pressure = 1013.25 * np.exp(-site.elevation / 8435.0) + rng.normal(0.0, 1.0, SERIES_LEN)
    daylen = day_length_hours(site.latitude, idx)
    noise = rng.standard_normal(SERIES_LEN)
    return np.stack([tmean, tmin, tmax, precip, pressure, daylen, noise])


def gdd_date(temps: np.ndarray, params: SpeciesParams):
    """First series index where degree-days above t_base reach f_star, else None."""
    temps = np.asarray(temps, dtype=np.float64)
    if temps.ndim != 1 or temps.shape[0] < params.start_day + 1:
        raise ValueError(f"series of shape {temps.shape} does not cover the "
                         f"accumulation window starting at {params.start_day}")
    acc = np.cumsum(np.maximum(temps[params.start_day:] - params.t_base, 0.0))
    hit = acc >= params.f_star
    if not hit.any():
        return None
    return params.start_day + int(np.argmax(hit))


def generate_dataset(cfg: ClimateConfig, species: list[SpeciesParams] | None = None,
                     seed: int | None = None) -> list[SampleRecord]:
    """All site-years in canonical order (site, then year), fully seeded."""
    cfg.validate()
    seed = cfg.seed if seed is None else seed
    species = default_species() if species is None else species
    sites = generate_sites(cfg, seed)
    y0, y1 = cfg.year_range
    records = []
    for site in sites:
        for year in range(y0, y1 + 1):
            x = generate_climate(site, year, cfg, seed)
            y = np.full(len(species), np.nan)
            for s, sp in enumerate(species):
                obs_rng = np.random.default_rng(
                    np.random.SeedSequence([seed, site.id, year, 1000 + s]))
                d = gdd_date(x[0], sp)
                if d is None:
                    continue
                if obs_rng.uniform() < cfg.missing_rate:
                    continue
                date = d + DAY_OFFSET
                if sp.sigma_obs > 0:
                    date = int(round(date + obs_rng.normal(0.0, sp.sigma_obs)))
                date = min(max(date, DAY_OFFSET), DAY_OFFSET + SERIES_LEN - 1)
                y[s] = float(date)
            records.append(SampleRecord(site.id, year, site.elevation, site.latitude, x, y))
    return records


def annual_mean_temp(record: SampleRecord) -> float:
    return float(record.x[0].mean())


# ---------------------------------------------------------------------------
# split protocols


def _check_nonempty(name, *parts):
    for label, part in zip(("train", "val", "test"), parts):
        if len(part) == 0:
            raise SplitError(f"{name}: empty {label} partition")


def split_chronological(records, train_end_year: int, val_end_year: int):
    """Train <= train_end_year < val <= val_end_year < test, whole years."""
    if train_end_year >= val_end_year:
        raise SplitError(f"need train_end_year < val_end_year, "
                         f"got {train_end_year} >= {val_end_year}")
    train = [r for r in records if r.year <= train_end_year]
    val = [r for r in records if train_end_year < r.year <= val_end_year]
    test = [r for r in records if r.year > val_end_year]
    _check_nonempty("split_chronological", train, val, test)
    return train, val, test


def _take_counts(n: int, test_frac: float, val_frac: float, name: str):
    n_test = max(1, int(round(n * test_frac)))
    n_val = max(1, int(round(n * val_frac)))
    if n_test + n_val >= n:
        raise SplitError(f"{name}: fractions leave no training data (n={n})")
    return n_test, n_val


def split_by_annual_temp(records, test_frac: float = 0.15, val_frac: float = 0.15):
    """Rank whole years by mean annual temperature; warmest block is the test set."""
    years = sorted({r.year for r in records})
    if len(years) < 3:
        raise SplitError(f"split_by_annual_temp: need >= 3 distinct years, got {len(years)}")
    means = {yr: float(np.mean([annual_mean_temp(r) for r in records if r.year == yr]))
             for yr in years}
    ranked = sorted(years, key=lambda yr: means[yr], reverse=True)
    n_test, n_val = _take_counts(len(years), test_frac, val_frac, "split_by_annual_temp")
    test_years = set(ranked[:n_test])
    val_years = set(ranked[n_test:n_test + n_val])
    train = [r for r in records if r.year not in test_years and r.year not in val_years]
    val = [r for r in records if r.year in val_years]
    test = [r for r in records if r.year in test_years]
    _check_nonempty("split_by_annual_temp", train, val, test)
    return train, val, test


def split_by_elevation(records, test_frac: float = 0.25, val_frac: float = 0.15):
    """Rank individual site-years by elevation; highest block is the test set."""
    order = sorted(range(len(records)),
                   key=lambda i: (-records[i].elevation, records[i].site_id, records[i].year))
    n_test, n_val = _take_counts(len(records), test_frac, val_frac, "split_by_elevation")
    test_idx = set(order[:n_test])
    val_idx = set(order[n_test:n_test + n_val])
    train = [records[i] for i in range(len(records)) if i not in test_idx and i not in val_idx]
    val = [records[i] for i in sorted(val_idx)]
    test = [records[i] for i in sorted(test_idx)]
    _check_nonempty("split_by_elevation", train, val, test)
    return train, val, test


def split_random(records, test_frac: float = 0.15, val_frac: float = 0.15, seed: int = 0):
    """Uniform seeded partition over site-years (the stationary control)."""
    n = len(records)
    n_test, n_val = _take_counts(n, test_frac, val_frac, "split_random")
    perm = np.random.default_rng(np.random.SeedSequence([seed, 0x5B117])).permutation(n)
    test_idx = set(perm[:n_test].tolist())
    val_idx = set(perm[n_test:n_test + n_val].tolist())
    train = [records[i] for i in range(n) if i not in test_idx and i not in val_idx]
    val = [records[i] for i in range(n) if i in val_idx]
    test = [records[i] for i in range(n) if i in test_idx]
    _check_nonempty("split_random", train, val, test)
    return train, val, test


SPLIT_KINDS = ("chronological", "annual-temperature", "elevation", "random")


def apply_split(records, spec: dict):
    """Dispatch on a split spec dict: {"kind": ..., params...}."""
    spec = dict(spec)
    kind = spec.pop("kind", None)
    if kind == "chronological":
        return split_chronological(records, spec["train_end_year"], spec["val_end_year"])
    if kind == "annual-temperature":
        return split_by_annual_temp(records, spec.get("test_frac", 0.15),
                                    spec.get("val_frac", 0.15))
    if kind == "elevation":
        return split_by_elevation(records, spec.get("test_frac", 0.25),
                                  spec.get("val_frac", 0.15))
    if kind == "random":
        return split_random(records, spec.get("test_frac", 0.15),
                            spec.get("val_frac", 0.15), spec.get("seed", 0))
    raise SplitError(f"unknown split kind {kind!r}; expected one of {SPLIT_KINDS}")


# ---------------------------------------------------------------------------
# dense array view used by the trainer


@dataclass
class Dataset:
    x: np.ndarray          # (N, 7, 365)
    y: np.ndarray          # (N, S)
    site_id: np.ndarray
    year: np.ndarray
    elevation: np.ndarray
    latitude: np.ndarray

    def __len__(self):
        return self.x.shape[0]


def to_arrays(records) -> Dataset:
    if len(records) == 0:
        raise ValueError("to_arrays: empty record list")
    return Dataset(
        x=np.stack([r.x for r in records]).astype(np.float64),
        y=np.stack([r.y for r in records]).astype(np.float64),
        site_id=np.array([r.site_id for r in records]),
        year=np.array([r.year for r in records], dtype=np.int64),
        elevation=np.array([r.elevation for r in records]),
        latitude=np.array([r.latitude for r in records]),
    )


def subset(ds: Dataset, idx) -> Dataset:
    idx = np.asarray(idx)
    return Dataset(x=ds.x[idx], y=ds.y[idx], site_id=ds.site_id[idx],
                   year=ds.year[idx], elevation=ds.elevation[idx],
                   latitude=ds.latitude[idx])


def guidance_values(ds: Dataset, guidance: str) -> np.ndarray:
    if guidance == "year":
        return ds.year.astype(np.float64)
    if guidance == "annual-temperature":
        return ds.x[:, 0, :].mean(axis=1)
    if guidance == "elevation":
        return ds.elevation.astype(np.float64)
    raise ValueError(f"unknown guidance {guidance!r}")


# ---------------------------------------------------------------------------
# CSV interchange


def _fmt(v: float) -> str:
    return repr(float(v))


def csv_write(records, path, channels=CHANNELS):
    """One row per site-year; x columns flattened channel-major, day 0..364."""
    n_species = len(records[0].y) if records else 0
    header = (["site_id", "year", "elevation_m", "latitude_deg"]
              + [f"y_species_{s + 1}" for s in range(n_species)]
              + [f"x_{ch}_{d}" for ch in channels for d in range(SERIES_LEN)])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in records:
            labels = ["" if not np.isfinite(v) else _fmt(v) for v in r.y]
            row = ([str(r.site_id), str(r.year), _fmt(r.elevation), _fmt(r.latitude)]
                   + labels + [_fmt(v) for v in r.x.ravel()])
            w.writerow(row)


def csv_read(path):
    """Inverse of csv_write; accepts any 7-channel decomposition in the header."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvFormatError("line 1: empty file, header row required")
        fixed = ["site_id", "year", "elevation_m", "latitude_deg"]
        if header[:4] != fixed:
            raise CsvFormatError(f"line 1: header must start with {fixed}, got {header[:4]}")
        n_species = 0
        col = 4
        while col < len(header) and header[col] == f"y_species_{n_species + 1}":
            n_species += 1
            col += 1
        xcols = header[col:]
        if len(xcols) != len(CHANNELS) * SERIES_LEN:
            raise CsvFormatError(
                f"line 1: expected {len(CHANNELS) * SERIES_LEN} x columns "
                f"({len(CHANNELS)} channels x {SERIES_LEN} days), got {len(xcols)}")
        channels = []
        for c in range(len(CHANNELS)):
            block = xcols[c * SERIES_LEN:(c + 1) * SERIES_LEN]
            name = block[0][2:].rsplit("_", 1)[0] if block[0].startswith("x_") else None
            expect = [f"x_{name}_{d}" for d in range(SERIES_LEN)]
            if name is None or block != expect:
                raise CsvFormatError(
                    f"line 1: x columns must be channel-major x_<channel>_<0..364>; "
                    f"channel block {c} malformed near column {col + c * SERIES_LEN + 1}")
            channels.append(name)
        if len(set(channels)) != len(channels):
            raise CsvFormatError(f"line 1: duplicate channel names {channels}")

        records = []
        width = len(header)
        for lineno, row in enumerate(reader, start=2):
            if len(row) != width:
                raise CsvFormatError(f"line {lineno}: expected {width} fields, got {len(row)}")
            try:
                site_id = int(row[0])
                year = int(row[1])
                elevation = float(row[2])
                latitude = float(row[3])
                y = np.array([np.nan if v == "" else float(v)
                              for v in row[4:4 + n_species]])
                x = np.array([float(v) for v in row[4 + n_species:]],
                             dtype=np.float64).reshape(len(CHANNELS), SERIES_LEN)
            except ValueError as exc:
                raise CsvFormatError(f"line {lineno}: {exc}")
            records.append(SampleRecord(site_id, year, elevation, latitude, x, y))
    return records


# ---------------------------------------------------------------------------
# shift summaries (the generate command prints these per protocol)


def shift_stats(train, test) -> dict:
    """Mean temperature and mean label-date change, test minus train."""
    t_train = float(np.mean([annual_mean_temp(r) for r in train]))
    t_test = float(np.mean([annual_mean_temp(r) for r in test]))
    d_train = np.concatenate([r.y[np.isfinite(r.y)] for r in train]) if train else np.array([])
    d_test = np.concatenate([r.y[np.isfinite(r.y)] for r in test]) if test else np.array([])
    return {
        "delta_t": t_test - t_train,
        "delta_date": (float(d_test.mean()) - float(d_train.mean())
                       if len(d_train) and len(d_test) else float("nan")),
    }
