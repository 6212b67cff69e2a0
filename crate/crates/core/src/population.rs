//! Curve populations: time grids, synthetic generation, CSV ingestion and
//! population-level summaries.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::{substream, Purpose};
use crate::util::fit_line;

const GRID_PREFIX: &str = "# grid:";

/// Measurement times `0 = t_1 < ... < t_D = T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    points: Vec<f64>,
}

impl TimeGrid {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return invalid(format!("time grid needs at least 2 points, got {}", points.len()));
        }
        if points.iter().any(|t| !t.is_finite()) {
            return invalid("time grid contains non-finite values");
        }
        if points[0] != 0.0 {
            return invalid(format!("time grid must start at 0, starts at {}", points[0]));
        }
        if let Some(w) = points.windows(2).find(|w| w[1] <= w[0]) {
            return invalid(format!(
                "time grid must be strictly increasing ({} followed by {})",
                w[0], w[1]
            ));
        }
        Ok(Self { points })
    }

    /// `d` equally spaced points on `[0, horizon]`.
    pub fn uniform(d: usize, horizon: f64) -> Result<Self> {
        if d < 2 {
            return invalid(format!("time grid needs at least 2 points, got {d}"));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return invalid(format!("horizon must be positive, got {horizon}"));
        }
        let step = horizon / (d - 1) as f64;
        let mut points: Vec<f64> = (0..d).map(|j| j as f64 * step).collect();
        points[d - 1] = horizon;
        Self::new(points)
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn horizon(&self) -> f64 {
        self.points[self.points.len() - 1]
    }
}

/// A finite population of `N` curves observed on a common grid, with a
/// positive auxiliary size variable per unit.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePopulation {
    grid: TimeGrid,
    /// Row-major `N x D`.
    values: Vec<f64>,
    auxiliary: Vec<f64>,
    ids: Vec<String>,
}

impl CurvePopulation {
    pub fn new(
        grid: TimeGrid,
        values: Vec<f64>,
        auxiliary: Vec<f64>,
        ids: Vec<String>,
    ) -> Result<Self> {
        let n = auxiliary.len();
        let d = grid.len();
        if n < 2 {
            return invalid(format!("population needs at least 2 units, got {n}"));
        }
        if ids.len() != n {
            return invalid(format!("{} ids for {} units", ids.len(), n));
        }
        if values.len() != n * d {
            return invalid(format!(
                "value matrix has {} entries, expected {n} x {d}",
                values.len()
            ));
        }
        if let Some(k) = auxiliary.iter().position(|x| !(*x > 0.0 && x.is_finite())) {
            return invalid(format!(
                "auxiliary value of unit {} must be positive, got {}",
                ids[k], auxiliary[k]
            ));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return invalid(format!("non-finite curve value for unit {}", ids[pos / d]));
        }
        let mut seen = HashSet::with_capacity(n);
        for (row, id) in ids.iter().enumerate() {
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateId {
                    id: id.clone(),
                    row: row + 1,
                });
            }
        }
        Ok(Self {
            grid,
            values,
            auxiliary,
            ids,
        })
    }

    /// Population with ids `"1".."N"`.
    pub fn from_rows(grid: TimeGrid, rows: &[Vec<f64>], auxiliary: Vec<f64>) -> Result<Self> {
        let d = grid.len();
        if let Some(r) = rows.iter().find(|r| r.len() != d) {
            return invalid(format!("curve of length {} on a grid of {d} points", r.len()));
        }
        let values = rows.iter().flatten().copied().collect();
        let ids = (1..=rows.len()).map(|k| k.to_string()).collect();
        Self::new(grid, values, auxiliary, ids)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_units(&self) -> usize {
        self.auxiliary.len()
    }

    pub fn n_points(&self) -> usize {
        self.grid.len()
    }

    pub fn row(&self, k: usize) -> &[f64] {
        let d = self.n_points();
        &self.values[k * d..(k + 1) * d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.n_points())
    }

    pub fn value(&self, k: usize, j: usize) -> f64 {
        self.values[k * self.n_points() + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn auxiliary(&self) -> &[f64] {
        &self.auxiliary
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// `mu_N(t_j) = (1/N) sum_k Y_k(t_j)`.
    pub fn mean_curve(&self) -> Vec<f64> {
        let mut sum = vec![0.0; self.n_points()];
        for row in self.rows() {
            for (s, v) in sum.iter_mut().zip(row) {
                *s += v;
            }
        }
        let n = self.n_units() as f64;
        sum.into_iter().map(|s| s / n).collect()
    }

    /// Replaces the auxiliary variable, keeping curves and ids.
    pub fn with_auxiliary(self, auxiliary: Vec<f64>) -> Result<Self> {
        Self::new(self.grid, self.values, auxiliary, self.ids)
    }

    /// Multiplies every curve value by `a`.
    pub fn scaled(&self, a: f64) -> Result<Self> {
        Self::new(
            self.grid.clone(),
            self.values.iter().map(|v| v * a).collect(),
            self.auxiliary.clone(),
            self.ids.clone(),
        )
    }
}

/// Parameters of the synthetic load-curve generator.
///
/// Each curve is `s_k * (g(t) + idio_scale * e_k(t))`, where `g` is a common
/// level with a slow trend and a periodic "daily" component, `e_k` is a
/// smooth unit-specific term (random low-order Fourier modes plus a random
/// change in daily amplitude) and `s_k` is log-normal. The auxiliary value is
/// the unit's grid mean times a log-normal perturbation of scale `x_noise`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub base_level: f64,
    pub trend_amplitude: f64,
    pub daily_amplitude: f64,
    /// Number of periodic cycles over the horizon (7 for a week of days).
    pub cycles: f64,
    pub idio_scale: f64,
    pub idio_modes: usize,
    /// Log-scale standard deviation of the size factor.
    pub size_sigma: f64,
    pub x_noise: f64,
    /// Units given a small size factor and a sharp isolated peak.
    pub influential_units: usize,
    /// Peak height of planted units, as a multiple of the mean of `g`.
    pub influential_peak: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            base_level: 1.0,
            trend_amplitude: 0.2,
            daily_amplitude: 1.0,
            cycles: 7.0,
            idio_scale: 0.15,
            idio_modes: 6,
            size_sigma: 0.7,
            x_noise: 0.1,
            influential_units: 0,
            influential_peak: 40.0,
        }
    }
}

impl GeneratorConfig {
    /// Noise-free configuration: every curve is `s_k g(t)` and `x_k` is
    /// exactly proportional to `s_k`.
    pub fn proportional() -> Self {
        Self {
            idio_scale: 0.0,
            x_noise: 0.0,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        let nonneg = [
            ("trend_amplitude", self.trend_amplitude),
            ("daily_amplitude", self.daily_amplitude),
            ("idio_scale", self.idio_scale),
            ("size_sigma", self.size_sigma),
            ("x_noise", self.x_noise),
            ("influential_peak", self.influential_peak),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return invalid(format!("{name} must be a nonnegative number, got {v}"));
            }
        }
        if !(self.base_level > 0.0 && self.base_level.is_finite()) {
            return invalid("base_level must be positive");
        }
        if self.trend_amplitude >= 1.0 {
            return invalid("trend_amplitude must be below 1 to keep the level positive");
        }
        if !(self.cycles > 0.0 && self.cycles.is_finite()) {
            return invalid("cycles must be positive");
        }
        Ok(())
    }

    fn common_level(&self, u: f64) -> f64 {
        let tau = std::f64::consts::TAU;
        self.base_level * (1.0 + self.trend_amplitude * (tau * u).sin())
            + self.daily_shape(u) * self.daily_amplitude
    }

    fn daily_shape(&self, u: f64) -> f64 {
        0.5 * (1.0 - (std::f64::consts::TAU * self.cycles * u).cos())
    }
}

/// A generated population and the indices of its planted influential units.
#[derive(Debug, Clone)]
pub struct SyntheticPopulation {
    pub population: CurvePopulation,
    pub planted: Vec<usize>,
}

pub fn generate_synthetic(
    n_units: usize,
    grid: &TimeGrid,
    config: &GeneratorConfig,
    seed: u64,
) -> Result<CurvePopulation> {
    generate_synthetic_with_plants(n_units, grid, config, seed).map(|s| s.population)
}

pub fn generate_synthetic_with_plants(
    n_units: usize,
    grid: &TimeGrid,
    config: &GeneratorConfig,
    seed: u64,
) -> Result<SyntheticPopulation> {
    if n_units < 2 {
        return invalid(format!("n_units must be at least 2, got {n_units}"));
    }
    config.validate()?;
    if config.influential_units >= n_units {
        return invalid("influential_units must be below n_units");
    }
    let d = grid.len();
    let horizon = grid.horizon();
    let us: Vec<f64> = grid.points().iter().map(|t| t / horizon).collect();
    let level: Vec<f64> = us.iter().map(|&u| config.common_level(u)).collect();
    let daily: Vec<f64> = us.iter().map(|&u| config.daily_shape(u)).collect();
    let level_mean = level.iter().sum::<f64>() / d as f64;

    let mut rng = substream(seed, Purpose::Generator, 0);
    let size_law = LogNormal::new(0.0, config.size_sigma)
        .map_err(|e| Error::InvalidInput(format!("size law: {e}")))?;
    let tau = std::f64::consts::TAU;

    let mut values = Vec::with_capacity(n_units * d);
    let mut sizes = Vec::with_capacity(n_units);
    for _ in 0..n_units {
        let s: f64 = size_law.sample(&mut rng);
        let coeffs: Vec<(f64, f64)> = (0..config.idio_modes)
            .map(|_| {
                let a: f64 = StandardNormal.sample(&mut rng);
                let b: f64 = StandardNormal.sample(&mut rng);
                (a, b)
            })
            .collect();
        let daily_shift: f64 = StandardNormal.sample(&mut rng);
        for j in 0..d {
            let mut idio = 0.5 * daily_shift * daily[j] * config.daily_amplitude;
            for (m, (a, b)) in coeffs.iter().enumerate() {
                let freq = (m + 1) as f64;
                let arg = tau * freq * us[j];
                idio += (a * arg.cos() + b * arg.sin()) / freq;
            }
            let raw = level[j] + config.idio_scale * idio;
            values.push(s * raw.max(0.05 * level[j]));
        }
        sizes.push(s);
    }

    let planted: Vec<usize> = if config.influential_units > 0 {
        let mut idx = index::sample(&mut rng, n_units, config.influential_units).into_vec();
        idx.sort_unstable();
        idx
    } else {
        Vec::new()
    };
    // Planted units get a size factor two log-sd below the median; their
    // auxiliary value comes from the curve before the peak is added.
    let small = (-2.0 * config.size_sigma).exp();
    let mut peaks = Vec::with_capacity(planted.len());
    for &k in &planted {
        let old = sizes[k];
        for v in &mut values[k * d..(k + 1) * d] {
            *v *= small / old;
        }
        sizes[k] = small;
        peaks.push(rng.random_range(0..d));
    }

    let noise_scale = config.x_noise;
    let mut auxiliary = Vec::with_capacity(n_units);
    for k in 0..n_units {
        let mean = values[k * d..(k + 1) * d].iter().sum::<f64>() / d as f64;
        let z: f64 = StandardNormal.sample(&mut rng);
        let factor = if noise_scale > 0.0 {
            (noise_scale * z - 0.5 * noise_scale * noise_scale).exp()
        } else {
            1.0
        };
        auxiliary.push(mean * factor);
    }

    for (&k, &center) in planted.iter().zip(&peaks) {
        let height = config.influential_peak * level_mean;
        let row = &mut values[k * d..(k + 1) * d];
        row[center] += height;
        if center > 0 {
            row[center - 1] += 0.5 * height;
        }
        if center + 1 < d {
            row[center + 1] += 0.5 * height;
        }
    }

    let ids = (1..=n_units).map(|k| format!("u{k:06}")).collect();
    let population = CurvePopulation::new(grid.clone(), values, auxiliary, ids)?;
    Ok(SyntheticPopulation {
        population,
        planted,
    })
}

fn value_column(j: usize) -> String {
    format!("y_{:04}", j + 1)
}

/// Writes the wide CSV layout: a `# grid:` line, then `id,x,y_0001,...`.
pub fn write_population<W: Write>(pop: &CurvePopulation, mut out: W) -> Result<()> {
    let grid: Vec<String> = pop.grid.points().iter().map(|t| t.to_string()).collect();
    writeln!(out, "{GRID_PREFIX} {}", grid.join(","))?;
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["id".to_string(), "x".to_string()];
    header.extend((0..pop.n_points()).map(value_column));
    w.write_record(&header)?;
    for (k, row) in pop.rows().enumerate() {
        let mut rec = Vec::with_capacity(row.len() + 2);
        rec.push(pop.ids[k].clone());
        rec.push(pop.auxiliary[k].to_string());
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_population(pop: &CurvePopulation, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_population(pop, std::io::BufWriter::new(file))
}

/// Reads a one-column CSV (header `t`) of grid points.
pub fn load_grid(path: &Path) -> Result<TimeGrid> {
    let mut rdr = csv::ReaderBuilder::new().from_path(path)?;
    let mut points = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let field = rec.get(0).unwrap_or("");
        let t = field.trim().parse::<f64>().map_err(|e| Error::Parse {
            row: i + 1,
            column: "t".into(),
            message: format!("{field:?}: {e}"),
        })?;
        points.push(t);
    }
    TimeGrid::new(points)
}

fn parse_grid_line(line: &str) -> Result<TimeGrid> {
    let body = line.trim_start_matches(GRID_PREFIX);
    let points = body
        .split(',')
        .enumerate()
        .map(|(j, s)| {
            s.trim().parse::<f64>().map_err(|e| Error::Parse {
                row: 0,
                column: format!("grid[{}]", j + 1),
                message: format!("{:?}: {e}", s.trim()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    TimeGrid::new(points)
}

/// Parses the wide CSV layout. The grid comes from `grid` if given, else
/// from a leading `# grid:` line, else defaults to `0, 1, ..., D-1`.
pub fn read_population<R: Read>(input: R, grid: Option<TimeGrid>) -> Result<CurvePopulation> {
    let mut reader = BufReader::new(input);
    let mut first = String::new();
    reader.read_line(&mut first)?;
    let (file_grid, body): (Option<TimeGrid>, Box<dyn Read + '_>) =
        if first.trim_start().starts_with(GRID_PREFIX) {
            (Some(parse_grid_line(first.trim())?), Box::new(reader))
        } else {
            (None, Box::new(std::io::Cursor::new(first).chain(reader)))
        };

    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(body);
    let headers = rdr.headers()?.clone();
    if headers.len() < 4 || &headers[0] != "id" || &headers[1] != "x" {
        return Err(Error::Parse {
            row: 0,
            column: "header".into(),
            message: "expected header id,x,y_0001,... with at least 2 value columns".into(),
        });
    }
    let d = headers.len() - 2;
    let grid = match grid.or(file_grid) {
        Some(g) => g,
        None => TimeGrid::new((0..d).map(|j| j as f64).collect())?,
    };
    if grid.len() != d {
        return invalid(format!(
            "grid has {} points but the file has {d} value columns",
            grid.len()
        ));
    }

    let mut ids = Vec::new();
    let mut auxiliary = Vec::new();
    let mut values = Vec::new();
    let mut seen = HashSet::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec?;
        if rec.len() != headers.len() {
            return Err(Error::Parse {
                row,
                column: "*".into(),
                message: format!("{} fields, expected {}", rec.len(), headers.len()),
            });
        }
        let id = rec[0].trim().to_string();
        if id.is_empty() {
            return Err(Error::Parse {
                row,
                column: "id".into(),
                message: "missing id".into(),
            });
        }
        if !seen.insert(id.clone()) {
            return Err(Error::DuplicateId { id, row });
        }
        let parse = |col: usize| -> Result<f64> {
            let field = rec[col].trim();
            let v = field.parse::<f64>().map_err(|e| Error::Parse {
                row,
                column: headers[col].to_string(),
                message: if field.is_empty() {
                    "missing value".to_string()
                } else {
                    format!("{field:?}: {e}")
                },
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    column: headers[col].to_string(),
                    message: "non-finite value".into(),
                });
            }
            Ok(v)
        };
        let x = parse(1)?;
        if x <= 0.0 {
            return Err(Error::Parse {
                row,
                column: "x".into(),
                message: format!("auxiliary value must be positive, got {x}"),
            });
        }
        for col in 2..headers.len() {
            values.push(parse(col)?);
        }
        auxiliary.push(x);
        ids.push(id);
    }
    CurvePopulation::new(grid, values, auxiliary, ids)
}

pub fn load_population(path: &Path, grid: Option<TimeGrid>) -> Result<CurvePopulation> {
    read_population(std::fs::File::open(path)?, grid)
}

/// Population-level summaries used as regularity diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PopulationProfile {
    pub mean_curve: Vec<f64>,
    /// Empirical Hölder exponent; `None` when the increment moments are all
    /// zero or too few grid pairs fall in the short-lag window.
    pub holder_beta_hat: Option<f64>,
    pub moment2: f64,
    pub moment4: f64,
}

pub fn population_profile(pop: &CurvePopulation) -> PopulationProfile {
    let n = pop.n_units() as f64;
    let d = pop.n_points();
    let t = pop.grid().points();
    let window = pop.grid().horizon() / 4.0;

    let mut log_lag = Vec::new();
    let mut log_moment = Vec::new();
    for i in 0..d {
        for j in i + 1..d {
            let lag = t[j] - t[i];
            if lag >= window {
                break;
            }
            let m = pop
                .rows()
                .map(|row| (row[j] - row[i]).powi(2))
                .sum::<f64>()
                / n;
            if m > 0.0 {
                log_lag.push(lag.ln());
                log_moment.push(m.ln());
            }
        }
    }
    let holder_beta_hat = fit_line(&log_lag, &log_moment).map(|f| f.slope / 2.0);

    let moment2 = pop.rows().map(|r| r[0].powi(2)).sum::<f64>() / n;
    let moment4 = pop.rows().map(|r| r[0].powi(4)).sum::<f64>() / n;
    PopulationProfile {
        mean_curve: pop.mean_curve(),
        holder_beta_hat,
        moment2,
        moment4,
    }
}
