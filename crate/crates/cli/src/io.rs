use std::collections::HashMap;
use std::path::Path;

use curveband_core::designs::{InclusionProfile, SampleDraw};
use curveband_core::estimators::CovarianceSurface;
use curveband_core::population::{load_grid, load_population, CurvePopulation, TimeGrid};
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::manifest::RunRecord;

pub fn csv_bytes<I>(header: &[&str], rows: I) -> CliResult<Vec<u8>>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.into_inner()
        .map_err(|e| CliError::Internal(format!("csv buffer: {e}")))
}

pub fn json_bytes<T: Serialize>(value: &T) -> CliResult<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(value)?;
    out.push(b'\n');
    Ok(out)
}

/// Columns over the grid, headed `t,<names...>`.
pub fn curve_table(grid: &TimeGrid, columns: &[(&str, &[f64])]) -> CliResult<Vec<u8>> {
    let mut header = vec!["t"];
    header.extend(columns.iter().map(|(name, _)| *name));
    let rows = grid.points().iter().enumerate().map(|(j, t)| {
        let mut row = vec![t.to_string()];
        row.extend(columns.iter().map(|(_, v)| v[j].to_string()));
        row
    });
    csv_bytes(&header, rows)
}

/// A `D x D` surface with the grid as header row and first column.
pub fn surface_table(surface: &CovarianceSurface) -> CliResult<Vec<u8>> {
    let points: Vec<String> = surface.grid.points().iter().map(|t| t.to_string()).collect();
    let mut header = vec!["t"];
    header.extend(points.iter().map(String::as_str));
    let d = surface.dim();
    let rows = (0..d).map(|i| {
        let mut row = vec![points[i].clone()];
        row.extend((0..d).map(|j| surface.matrix[(i, j)].to_string()));
        row
    });
    csv_bytes(&header, rows)
}

pub fn read_population(path: &Path, grid: Option<&Path>, record: &mut RunRecord) -> CliResult<CurvePopulation> {
    record.input(path)?;
    let grid = match grid {
        Some(g) => {
            record.input(g)?;
            Some(load_grid(g)?)
        }
        None => None,
    };
    Ok(load_population(path, grid)?)
}

fn column_index(headers: &csv::StringRecord, name: &str, path: &Path) -> CliResult<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| CliError::Data(format!("{}: missing column {name:?}", path.display())))
}

fn id_index(pop: &CurvePopulation) -> HashMap<&str, usize> {
    pop.ids().iter().enumerate().map(|(k, id)| (id.as_str(), k)).collect()
}

/// Reads a one-column CSV of unit ids (header `id`) as a sample of `pop`.
pub fn read_sample(path: &Path, pop: &CurvePopulation, record: &mut RunRecord) -> CliResult<SampleDraw> {
    record.input(path)?;
    let mut rdr = csv::Reader::from_path(path)?;
    let col = column_index(&rdr.headers()?.clone(), "id", path)?;
    let index = id_index(pop);
    let mut seen = vec![false; pop.n_units()];
    let mut units = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let id = rec.get(col).unwrap_or("").trim();
        let &k = index
            .get(id)
            .ok_or_else(|| CliError::Data(format!("{} row {}: unknown unit id {id:?}", path.display(), i + 1)))?;
        if seen[k] {
            return Err(CliError::Data(format!("{} row {}: unit {id:?} listed twice", path.display(), i + 1)));
        }
        seen[k] = true;
        units.push(k);
    }
    Ok(SampleDraw::new(units, pop.n_units())?)
}

/// Reads `id,pi` for every unit of `pop`; the sample size is the rounded
/// total.
pub fn read_pi(path: &Path, pop: &CurvePopulation, record: &mut RunRecord) -> CliResult<InclusionProfile> {
    record.input(path)?;
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let id_col = column_index(&headers, "id", path)?;
    let pi_col = column_index(&headers, "pi", path)?;
    let index = id_index(pop);
    let mut pi = vec![f64::NAN; pop.n_units()];
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        let id = rec.get(id_col).unwrap_or("").trim();
        let &k = index
            .get(id)
            .ok_or_else(|| CliError::Data(format!("{} row {row}: unknown unit id {id:?}", path.display())))?;
        if !pi[k].is_nan() {
            return Err(CliError::Data(format!("{} row {row}: unit {id:?} listed twice", path.display())));
        }
        let field = rec.get(pi_col).unwrap_or("").trim();
        pi[k] = field
            .parse()
            .map_err(|e| CliError::Data(format!("{} row {row}, column \"pi\": {field:?}: {e}", path.display())))?;
    }
    if let Some(k) = pi.iter().position(|v| v.is_nan()) {
        return Err(CliError::Data(format!(
            "{}: no inclusion probability for unit {:?}",
            path.display(),
            pop.ids()[k]
        )));
    }
    let n = pi.iter().sum::<f64>().round() as usize;
    InclusionProfile::new(pi, n).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn pi_table(pop: &CurvePopulation, profile: &InclusionProfile) -> CliResult<Vec<u8>> {
    let rows = pop
        .ids()
        .iter()
        .zip(profile.pi())
        .map(|(id, p)| vec![id.clone(), p.to_string()]);
    csv_bytes(&["id", "pi"], rows)
}

pub fn sample_table(pop: &CurvePopulation, sample: &SampleDraw) -> CliResult<Vec<u8>> {
    let rows = sample.indices().iter().map(|&k| vec![pop.ids()[k].clone()]);
    csv_bytes(&["id"], rows)
}
