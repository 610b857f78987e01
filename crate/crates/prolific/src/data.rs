//! Core data types for longitudinal functional crossover data plus CSV
//! ingestion in wide (one row per curve) and long (one row per sample) form.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

pub const N_PERIODS: usize = 4;

/// One observed response curve: the day within its period (normalized to
/// `[0, 1]`) and the curve sampled on the shared grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveObservation {
    pub day: f64,
    pub values: Vec<f64>,
}

/// All data recorded for one subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub id: String,
    /// Crossover group, 1 or 2.
    pub group: u8,
    /// Baseline covariate values, aligned with the dataset's covariate names.
    pub covariates: Vec<f64>,
    /// Curves per period; a period may be empty.
    pub periods: [Vec<CurveObservation>; N_PERIODS],
}

impl SubjectRecord {
    /// Number of curves across all four periods.
    pub fn curve_count(&self) -> usize {
        self.periods.iter().map(Vec::len).sum()
    }
}

/// Subjects observed over four crossover periods on a shared dense grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionalCrossoverDataset {
    pub subjects: Vec<SubjectRecord>,
    /// Ascending sample points in `[0, 1]`, shared by every curve.
    pub grid: Vec<f64>,
    pub covariate_names: Vec<String>,
}

impl FunctionalCrossoverDataset {
    /// Construct and validate in one step.
    pub fn new(
        subjects: Vec<SubjectRecord>,
        grid: Vec<f64>,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        let ds = FunctionalCrossoverDataset {
            subjects,
            grid,
            covariate_names,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn grid_len(&self) -> usize {
        self.grid.len()
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    /// Total curve count over all subjects and periods.
    pub fn total_curves(&self) -> usize {
        self.subjects.iter().map(SubjectRecord::curve_count).sum()
    }

    /// Subject indices sorted by id. Accumulations over subjects run in this
    /// order so results do not depend on how the subject list is permuted.
    pub fn canonical_subject_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.subjects.len()).collect();
        order.sort_by(|&a, &b| self.subjects[a].id.cmp(&self.subjects[b].id));
        order
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.grid.len();
        if r < 2 {
            return Err(Error::validation("grid must have at least two points"));
        }
        for w in self.grid.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::validation("grid must be strictly increasing"));
            }
        }
        if self.grid[0] < 0.0 || self.grid[r - 1] > 1.0 {
            return Err(Error::validation("grid must lie within [0, 1]"));
        }
        let mut seen = HashSet::new();
        for subject in &self.subjects {
            if !seen.insert(subject.id.as_str()) {
                return Err(Error::validation_at("duplicate subject id", &subject.id));
            }
            if subject.group != 1 && subject.group != 2 {
                return Err(Error::validation_at(
                    format!("group must be 1 or 2, got {}", subject.group),
                    &subject.id,
                ));
            }
            if subject.covariates.len() != self.covariate_names.len() {
                return Err(Error::validation_at(
                    format!(
                        "expected {} covariates, got {}",
                        self.covariate_names.len(),
                        subject.covariates.len()
                    ),
                    &subject.id,
                ));
            }
            for (p, period) in subject.periods.iter().enumerate() {
                for curve in period {
                    if !(0.0..=1.0).contains(&curve.day) || !curve.day.is_finite() {
                        return Err(Error::validation_at(
                            format!("day {} outside [0, 1]", curve.day),
                            format!("subject {}, period {}", subject.id, p + 1),
                        ));
                    }
                    if curve.values.len() != r {
                        return Err(Error::validation_at(
                            format!("curve has {} samples, grid has {}", curve.values.len(), r),
                            format!("subject {}, period {}", subject.id, p + 1),
                        ));
                    }
                    if curve.values.iter().any(|v| !v.is_finite()) {
                        return Err(Error::validation_at(
                            "non-finite sample value",
                            format!("subject {}, period {}", subject.id, p + 1),
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

/// 0/1 design indicators for the active-treatment and washout-carryover
/// periods, per (subject, period).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreatmentIndicators {
    pub tau: Vec<[bool; N_PERIODS]>,
    pub lambda: Vec<[bool; N_PERIODS]>,
}

impl TreatmentIndicators {
    pub fn tau_at(&self, subject: usize, period: usize) -> bool {
        self.tau[subject][period]
    }

    pub fn lambda_at(&self, subject: usize, period: usize) -> bool {
        self.lambda[subject][period]
    }
}

/// Treatment indicator as a pure function of (group, 0-based period).
pub fn tau_indicator(group: u8, period: usize) -> bool {
    (group == 1 && period == 0) || (group == 2 && period == 2)
}

/// Carryover indicator: the washout period immediately after treatment.
pub fn lambda_indicator(group: u8, period: usize) -> bool {
    (group == 1 && period == 1) || (group == 2 && period == 3)
}

/// Tabulate the treatment and carryover indicators for every subject.
pub fn derive_indicators(dataset: &FunctionalCrossoverDataset) -> TreatmentIndicators {
    let mut tau = Vec::with_capacity(dataset.subjects.len());
    let mut lambda = Vec::with_capacity(dataset.subjects.len());
    for subject in &dataset.subjects {
        let mut t = [false; N_PERIODS];
        let mut l = [false; N_PERIODS];
        for (p, (tp, lp)) in t.iter_mut().zip(l.iter_mut()).enumerate() {
            *tp = tau_indicator(subject.group, p);
            *lp = lambda_indicator(subject.group, p);
        }
        tau.push(t);
        lambda.push(l);
    }
    TreatmentIndicators { tau, lambda }
}

/// CSV layout of a dataset file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CsvFormat {
    /// One row per curve; value columns named `s_<grid value>`. Canonical.
    Wide,
    /// One row per sample with `grid_index`, `s` and `value` columns.
    Long,
}

/// Schema options for loading and saving.
#[derive(Debug, Clone)]
pub struct CsvSchema {
    pub format: CsvFormat,
    /// Nominal period length used to normalize raw day indices to `[0, 1]`.
    /// When absent, days already inside `[0, 1]` are kept as-is and raw day
    /// indices are min-max normalized over the file.
    pub period_length: Option<f64>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            format: CsvFormat::Wide,
            period_length: None,
        }
    }
}

/// Format a float with 17 significant digits so it round-trips exactly.
pub fn format_f64(x: f64) -> String {
    format!("{x:.16e}")
}

const FIXED_WIDE_COLS: [&str; 4] = ["subject_id", "group", "period", "day"];

/// Write a dataset in the schema's format.
pub fn save_dataset(
    dataset: &FunctionalCrossoverDataset,
    path: impl AsRef<Path>,
    schema: &CsvSchema,
) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut out = std::io::BufWriter::new(file);
    let io_err = |source| Error::Io {
        path: path.display().to_string(),
        source,
    };

    let mut header: Vec<String> = FIXED_WIDE_COLS.iter().map(|s| s.to_string()).collect();
    header.extend(dataset.covariate_names.iter().cloned());
    match schema.format {
        CsvFormat::Wide => {
            header.extend(dataset.grid.iter().map(|s| format!("s_{}", format_f64(*s))));
        }
        CsvFormat::Long => {
            header.extend(["grid_index", "s", "value"].map(str::to_string));
        }
    }
    writeln!(out, "{}", header.join(",")).map_err(io_err)?;

    for subject in &dataset.subjects {
        for (p, period) in subject.periods.iter().enumerate() {
            for curve in period {
                let mut prefix = vec![
                    subject.id.clone(),
                    subject.group.to_string(),
                    (p + 1).to_string(),
                    format_f64(curve.day),
                ];
                prefix.extend(subject.covariates.iter().map(|c| format_f64(*c)));
                match schema.format {
                    CsvFormat::Wide => {
                        let mut row = prefix;
                        row.extend(curve.values.iter().map(|v| format_f64(*v)));
                        writeln!(out, "{}", row.join(",")).map_err(io_err)?;
                    }
                    CsvFormat::Long => {
                        for (r, (s, v)) in
                            dataset.grid.iter().zip(curve.values.iter()).enumerate()
                        {
                            let mut row = prefix.clone();
                            row.push(r.to_string());
                            row.push(format_f64(*s));
                            row.push(format_f64(*v));
                            writeln!(out, "{}", row.join(",")).map_err(io_err)?;
                        }
                    }
                }
            }
        }
    }
    out.flush().map_err(io_err)?;
    Ok(())
}

struct RawCurve {
    subject_id: String,
    group: u8,
    period: usize,
    day: f64,
    covariates: Vec<f64>,
    values: Vec<f64>,
}

/// Load a dataset, inferring wide vs long layout from the header when the
/// schema's format does not match the file.
pub fn load_dataset(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<FunctionalCrossoverDataset> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Schema {
            path: display.clone(),
            message: e.to_string(),
        })?;

    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Schema {
            path: display.clone(),
            message: e.to_string(),
        })?
        .iter()
        .map(str::to_string)
        .collect();

    for required in FIXED_WIDE_COLS {
        if !headers.iter().any(|h| h == required) {
            return Err(Error::Schema {
                path: display,
                message: format!("missing required column `{required}`"),
            });
        }
    }
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let is_long = headers.iter().any(|h| h == "grid_index")
        && headers.iter().any(|h| h == "s")
        && headers.iter().any(|h| h == "value");

    // Covariates are everything between the fixed columns and the value
    // columns.
    let value_start = if is_long {
        col("grid_index")
    } else {
        match headers.iter().position(|h| h.starts_with("s_")) {
            Some(i) => i,
            None => {
                return Err(Error::Schema {
                    path: display,
                    message: "wide format requires `s_<grid value>` columns".into(),
                })
            }
        }
    };
    let covariate_names: Vec<String> = headers[4..value_start].to_vec();
    let n_cov = covariate_names.len();

    let parse_f64 = |field: &str, what: &str, line: u64| -> Result<f64> {
        field.trim().parse::<f64>().map_err(|_| Error::Schema {
            path: display.clone(),
            message: format!("line {line}: cannot parse {what} from `{field}`"),
        })
    };

    let mut grid: Vec<f64> = Vec::new();
    if !is_long {
        for h in &headers[value_start..] {
            let s = h.trim_start_matches("s_");
            grid.push(s.parse::<f64>().map_err(|_| Error::Schema {
                path: display.clone(),
                message: format!("cannot parse grid value from column `{h}`"),
            })?);
        }
    }

    let mut raw: Vec<RawCurve> = Vec::new();
    // Long format: map (subject, period, day bits) -> position in `raw`.
    let mut curve_index: std::collections::HashMap<(String, usize, u64), usize> =
        std::collections::HashMap::new();

    for (idx, record) in reader.records().enumerate() {
        let line = idx as u64 + 2;
        let record = record.map_err(|e| Error::Schema {
            path: display.clone(),
            message: format!("line {line}: {e}"),
        })?;
        let subject_id = record[col("subject_id")].trim().to_string();
        let group_raw = parse_f64(&record[col("group")], "group", line)?;
        if group_raw != 1.0 && group_raw != 2.0 {
            return Err(Error::validation_at(
                format!("group must be 1 or 2, got {group_raw}"),
                format!("{display}:{line}"),
            ));
        }
        let group = group_raw as u8;
        let period = parse_f64(&record[col("period")], "period", line)? as i64;
        if !(1..=4).contains(&period) {
            return Err(Error::validation_at(
                format!("period must be in 1..=4, got {period}"),
                format!("{display}:{line}"),
            ));
        }
        let day = parse_f64(&record[col("day")], "day", line)?;
        let mut covariates = Vec::with_capacity(n_cov);
        for (j, name) in covariate_names.iter().enumerate() {
            covariates.push(parse_f64(&record[4 + j], name, line)?);
        }

        if is_long {
            let gi = parse_f64(&record[value_start], "grid_index", line)? as usize;
            let s = parse_f64(&record[value_start + 1], "s", line)?;
            let v = parse_f64(&record[value_start + 2], "value", line)?;
            let key = (subject_id.clone(), period as usize - 1, day.to_bits());
            let pos = *curve_index.entry(key).or_insert_with(|| {
                raw.push(RawCurve {
                    subject_id,
                    group,
                    period: period as usize - 1,
                    day,
                    covariates,
                    values: Vec::new(),
                });
                raw.len() - 1
            });
            let entry = &mut raw[pos];
            if entry.values.len() <= gi {
                entry.values.resize(gi + 1, f64::NAN);
            }
            entry.values[gi] = v;
            if grid.len() <= gi {
                grid.resize(gi + 1, f64::NAN);
            }
            grid[gi] = s;
        } else {
            let values: Result<Vec<f64>> = (value_start..headers.len())
                .map(|j| parse_f64(&record[j], "sample value", line))
                .collect();
            raw.push(RawCurve {
                subject_id,
                group,
                period: period as usize - 1,
                day,
                covariates,
                values: values?,
            });
        }
    }

    if raw.is_empty() {
        return Err(Error::Schema {
            path: display,
            message: "file contains no data rows".into(),
        });
    }
    if grid.iter().any(|s| s.is_nan()) {
        return Err(Error::validation_at("long file has gaps in grid indices", display));
    }
    let r = grid.len();
    for c in &raw {
        if c.values.len() != r || c.values.iter().any(|v| v.is_nan()) {
            return Err(Error::validation_at(
                "ragged grid: curves do not share the same sample points",
                format!("{display}: subject {}", c.subject_id),
            ));
        }
    }

    // Day normalization.
    let days: Vec<f64> = raw.iter().map(|c| c.day).collect();
    let (min_day, max_day) = days
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &d| {
            (lo.min(d), hi.max(d))
        });
    let normalize: Box<dyn Fn(f64) -> f64> = match schema.period_length {
        Some(len) if len > 0.0 => Box::new(move |d| d / len),
        Some(_) => {
            return Err(Error::Config("period_length must be positive".into()));
        }
        None => {
            if min_day >= 0.0 && max_day <= 1.0 {
                Box::new(|d| d)
            } else if max_day > min_day {
                Box::new(move |d| (d - min_day) / (max_day - min_day))
            } else {
                Box::new(|_| 0.5)
            }
        }
    };

    // Group curves into subjects, preserving first-seen order.
    let mut subjects: Vec<SubjectRecord> = Vec::new();
    for c in raw {
        let day = normalize(c.day);
        let idx = match subjects.iter().position(|s| s.id == c.subject_id) {
            Some(i) => i,
            None => {
                subjects.push(SubjectRecord {
                    id: c.subject_id.clone(),
                    group: c.group,
                    covariates: c.covariates.clone(),
                    periods: Default::default(),
                });
                subjects.len() - 1
            }
        };
        if subjects[idx].group != c.group {
            return Err(Error::validation_at(
                "subject appears with two different groups",
                c.subject_id,
            ));
        }
        subjects[idx].periods[c.period].push(CurveObservation {
            day,
            values: c.values,
        });
    }

    FunctionalCrossoverDataset::new(subjects, grid, covariate_names)
}
