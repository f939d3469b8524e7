//! Quarterly macro panels in the Fred-QD layout: parsing, stationarity
//! transforms, fixed-window rolling quantile forecasts and selection
//! frequency tables.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::Read;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{QpcError, Result};
use crate::kernels::{mean_var, Dataset};
use crate::quantreg::{check_loss, QuantileLevel};
use crate::report::{sig6, sig6_opt};
use crate::simulation::{select, Method, MethodSettings};

const MISSING_MARKERS: [&str; 3] = ["", "NA", "NaN"];

/// A calendar quarter, stored as `year * 4 + (quarter - 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Quarter(pub i32);

impl Quarter {
    pub fn new(year: i32, quarter: u8) -> Self {
        Quarter(year * 4 + quarter as i32 - 1)
    }

    pub fn year(self) -> i32 {
        self.0.div_euclid(4)
    }

    pub fn quarter(self) -> u8 {
        (self.0.rem_euclid(4) + 1) as u8
    }

    pub fn next(self) -> Self {
        Quarter(self.0 + 1)
    }
}

impl fmt::Display for Quarter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}Q{}", self.year(), self.quarter())
    }
}

impl std::str::FromStr for Quarter {
    type Err = String;

    /// Accepts `2007Q3`, `2007-07-01` and `7/1/2007`.
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let s = s.trim();
        let bad = || format!("unrecognized date {s:?}");
        let from_month = |year: &str, month: &str| -> std::result::Result<Quarter, String> {
            let year: i32 = year.parse().map_err(|_| bad())?;
            let month: u8 = month.parse().map_err(|_| bad())?;
            if !(1..=12).contains(&month) {
                return Err(bad());
            }
            Ok(Quarter::new(year, (month - 1) / 3 + 1))
        };
        if let Some((year, q)) = s.split_once(['Q', 'q']) {
            let year: i32 = year.parse().map_err(|_| bad())?;
            let q: u8 = q.parse().map_err(|_| bad())?;
            if !(1..=4).contains(&q) {
                return Err(bad());
            }
            return Ok(Quarter::new(year, q));
        }
        let parts: Vec<&str> = s.split('-').collect();
        if parts.len() == 3 && parts[0].len() == 4 {
            return from_month(parts[0], parts[1]);
        }
        let parts: Vec<&str> = s.split('/').collect();
        if parts.len() == 3 {
            return from_month(parts[2], parts[0]);
        }
        Err(bad())
    }
}

impl Serialize for Quarter {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Quarter {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Fred-QD transform code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Tcode {
    Level = 1,
    Diff = 2,
    Diff2 = 3,
    Log = 4,
    DiffLog = 5,
    Diff2Log = 6,
    DiffPctChange = 7,
}

impl Tcode {
    pub fn from_code(code: i64) -> Option<Self> {
        Some(match code {
            1 => Tcode::Level,
            2 => Tcode::Diff,
            3 => Tcode::Diff2,
            4 => Tcode::Log,
            5 => Tcode::DiffLog,
            6 => Tcode::Diff2Log,
            7 => Tcode::DiffPctChange,
            _ => return None,
        })
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    /// Leading observations lost to differencing.
    pub fn lag(self) -> usize {
        match self {
            Tcode::Level | Tcode::Log => 0,
            Tcode::Diff | Tcode::DiffLog => 1,
            Tcode::Diff2 | Tcode::Diff2Log | Tcode::DiffPctChange => 2,
        }
    }

    pub fn takes_log(self) -> bool {
        matches!(self, Tcode::Log | Tcode::DiffLog | Tcode::Diff2Log)
    }
}

/// Raw quarterly panel; `values[k][t]` is series `k` at date `t`, `None`
/// where the file has a missing marker.
#[derive(Debug, Clone, PartialEq)]
pub struct MacroPanel {
    pub dates: Vec<Quarter>,
    pub names: Vec<String>,
    pub tcodes: Vec<Tcode>,
    pub values: Vec<Vec<Option<f64>>>,
}

impl MacroPanel {
    pub fn new(dates: Vec<Quarter>, names: Vec<String>, tcodes: Vec<Tcode>, values: Vec<Vec<Option<f64>>>) -> Result<Self> {
        if names.len() != tcodes.len() || names.len() != values.len() {
            return Err(QpcError::InvalidDataset(format!(
                "{} names, {} transform codes and {} series",
                names.len(),
                tcodes.len(),
                values.len()
            )));
        }
        if let Some(w) = dates.windows(2).find(|w| w[1] <= w[0]) {
            return Err(QpcError::InvalidDataset(format!("dates not strictly increasing at {}", w[1])));
        }
        let mut seen = HashSet::new();
        for name in &names {
            if !seen.insert(name.as_str()) {
                return Err(QpcError::InvalidDataset(format!("duplicate series name {name:?}")));
            }
        }
        if let Some(k) = values.iter().position(|v| v.len() != dates.len()) {
            return Err(QpcError::InvalidDataset(format!(
                "series {} has {} values for {} dates",
                names[k],
                values[k].len(),
                dates.len()
            )));
        }
        Ok(Self { dates, names, tcodes, values })
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Row positions with at least one missing value.
    pub fn incomplete_rows(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&t| self.values.iter().any(|v| v[t].is_none()))
            .collect()
    }
}

pub fn load_panel(path: &Path) -> Result<MacroPanel> {
    let file = std::fs::File::open(path)?;
    parse_panel(file)
}

/// Parses the Fred-QD layout: a header row (date column first, then series
/// names), an optional `factors` row, a `transform` row of codes, then one
/// row per quarter. Row numbers in errors are 1-based file lines.
pub fn parse_panel<R: Read>(reader: R) -> Result<MacroPanel> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| QpcError::Parse {
            row: i + 1,
            column: 0,
            message: e.to_string(),
        })?;
        rows.push(rec);
    }
    let header = rows.first().ok_or_else(|| QpcError::InvalidDataset("empty file".into()))?;
    let names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    if names.is_empty() {
        return Err(QpcError::InvalidDataset("no series columns".into()));
    }
    let width = names.len() + 1;
    let check_width = |row: usize, rec: &csv::StringRecord| {
        if rec.len() != width {
            Err(QpcError::Parse {
                row,
                column: rec.len().min(width) + 1,
                message: format!("expected {width} fields, found {}", rec.len()),
            })
        } else {
            Ok(())
        }
    };

    let mut line = 1;
    if rows.get(line).is_some_and(|r| r.get(0).is_some_and(|c| c.eq_ignore_ascii_case("factors"))) {
        line += 1;
    }
    let tc_row = rows.get(line).ok_or_else(|| QpcError::Parse {
        row: line + 1,
        column: 1,
        message: "missing transform row".into(),
    })?;
    let tc_line = tc_row.position().map_or(line + 1, |p| p.line() as usize);
    let label = tc_row.get(0).unwrap_or("");
    if !(label.eq_ignore_ascii_case("transform") || label.eq_ignore_ascii_case("tcode")) {
        return Err(QpcError::Parse {
            row: tc_line,
            column: 1,
            message: format!("expected a transform row, found {label:?}"),
        });
    }
    check_width(tc_line, tc_row)?;
    let mut tcodes = Vec::with_capacity(names.len());
    for (k, cell) in tc_row.iter().skip(1).enumerate() {
        let code: f64 = cell.parse().map_err(|_| QpcError::Parse {
            row: tc_line,
            column: k + 2,
            message: format!("transform code {cell:?} is not a number"),
        })?;
        let tc = (code.fract() == 0.0)
            .then(|| Tcode::from_code(code as i64))
            .flatten()
            .ok_or_else(|| QpcError::UnknownTcode {
                series: names[k].clone(),
                code: code as i64,
            })?;
        tcodes.push(tc);
    }
    line += 1;

    let mut dates = Vec::new();
    let mut values = vec![Vec::new(); names.len()];
    for (i, rec) in rows.iter().enumerate().skip(line) {
        let row = rec.position().map_or(i + 1, |p| p.line() as usize);
        if rec.iter().all(str::is_empty) {
            continue;
        }
        check_width(row, rec)?;
        let date = rec[0].parse::<Quarter>().map_err(|message| QpcError::Parse {
            row,
            column: 1,
            message,
        })?;
        dates.push(date);
        for (k, cell) in rec.iter().skip(1).enumerate() {
            let v = if MISSING_MARKERS.contains(&cell) {
                None
            } else {
                let x: f64 = cell.parse().map_err(|_| QpcError::Parse {
                    row,
                    column: k + 2,
                    message: format!("{cell:?} is not a number"),
                })?;
                if !x.is_finite() {
                    return Err(QpcError::Parse {
                        row,
                        column: k + 2,
                        message: format!("{cell:?} is not finite"),
                    });
                }
                Some(x)
            };
            values[k].push(v);
        }
    }
    MacroPanel::new(dates, names, tcodes, values)
}

/// Stationary panel after transforms, trimmed so all series share one date
/// index.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformedPanel {
    pub dates: Vec<Quarter>,
    pub names: Vec<String>,
    pub values: Vec<Vec<Option<f64>>>,
}

impl TransformedPanel {
    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

fn transform(x: &[Option<f64>], code: Tcode) -> Vec<Option<f64>> {
    let lift = |f: &dyn Fn(f64) -> f64| x.iter().map(|v| v.map(f)).collect::<Vec<_>>();
    let diff = |v: &[Option<f64>]| {
        let mut out = vec![None; v.len()];
        for t in 1..v.len() {
            out[t] = v[t].zip(v[t - 1]).map(|(a, b)| a - b);
        }
        out
    };
    match code {
        Tcode::Level => x.to_vec(),
        Tcode::Diff => diff(x),
        Tcode::Diff2 => diff(&diff(x)),
        Tcode::Log => lift(&f64::ln),
        Tcode::DiffLog => diff(&lift(&f64::ln)),
        Tcode::Diff2Log => diff(&diff(&lift(&f64::ln))),
        Tcode::DiffPctChange => {
            let mut growth = vec![None; x.len()];
            for t in 1..x.len() {
                growth[t] = x[t].zip(x[t - 1]).map(|(a, b)| a / b - 1.0);
            }
            diff(&growth)
        }
    }
}

/// Applies each series' transform code and drops the leading rows lost to
/// the deepest difference, so every series starts on the same date.
pub fn apply_tcodes(panel: &MacroPanel) -> Result<TransformedPanel> {
    let trim = panel.tcodes.iter().map(|c| c.lag()).max().unwrap_or(0);
    if trim >= panel.len() {
        return Err(QpcError::InvalidDataset(format!(
            "{} rows cannot absorb {trim} leading differences",
            panel.len()
        )));
    }
    let mut values = Vec::with_capacity(panel.names.len());
    for ((name, &code), x) in panel.names.iter().zip(&panel.tcodes).zip(&panel.values) {
        if code.takes_log() && x.iter().flatten().any(|&v| v <= 0.0) {
            return Err(QpcError::NonPositiveForLog { series: name.clone() });
        }
        if code == Tcode::DiffPctChange && x.iter().flatten().any(|&v| v == 0.0) {
            return Err(QpcError::InvalidDataset(format!("series {name} has zeros but its transform divides by it")));
        }
        values.push(transform(x, code)[trim..].to_vec());
    }
    Ok(TransformedPanel {
        dates: panel.dates[trim..].to_vec(),
        names: panel.names.clone(),
        values,
    })
}

/// Options for a rolling forecast.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForecastSettings {
    pub method: MethodSettings,
    /// Center and scale predictors within each window before selection.
    pub standardize: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ForecastRecord {
    /// Date of the predictor row the forecast conditions on.
    pub origin: Quarter,
    /// Date of the forecast target (one quarter after `origin`).
    pub target_date: Quarter,
    pub selected: Vec<String>,
    #[serde(serialize_with = "sig6_opt")]
    pub prediction: Option<f64>,
    #[serde(serialize_with = "sig6_opt")]
    pub realized: Option<f64>,
    #[serde(serialize_with = "sig6_opt")]
    pub loss: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ForecastRun {
    pub target: String,
    #[serde(serialize_with = "sig6")]
    pub tau: f64,
    pub window: usize,
    pub method: Method,
    /// Every predictor the run could choose from.
    pub series: Vec<String>,
    pub records: Vec<ForecastRecord>,
}

impl ForecastRun {
    /// Mean check loss over the records that produced a forecast.
    pub fn mean_loss(&self) -> Option<f64> {
        let losses: Vec<f64> = self.records.iter().filter_map(|r| r.loss).collect();
        (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| QpcError::Io(e.to_string()))
    }
}

/// Fixed-length sliding-window one-step-ahead forecasts of `target`.
///
/// Positions are 1-based over the `T` transformed rows. For origin
/// `o = l..T-1` the window pairs predictors at `t` with the target at `t+1`
/// for `t = o-l+1..o-1`, so it only touches rows `o-l+1..o`; the forecast of
/// the target at `o+1` uses the predictors at `o`. That gives `T - l`
/// records. Predictors with a missing value in the window or at the origin
/// are left out of that window.
pub fn rolling_forecast(
    panel: &TransformedPanel,
    target: &str,
    tau: QuantileLevel,
    window: usize,
    method: Method,
    settings: &ForecastSettings,
) -> Result<ForecastRun> {
    let yk = panel
        .index_of(target)
        .ok_or_else(|| QpcError::UnknownSeries(target.to_string()))?;
    let total = panel.len();
    if window < 2 || window >= total {
        return Err(QpcError::InvalidArgument(format!(
            "window length {window} must lie in 2..{total} for {total} usable rows"
        )));
    }
    let predictors: Vec<usize> = (0..panel.names.len()).filter(|&k| k != yk).collect();
    let records = (window..total)
        .into_par_iter()
        .map(|o| forecast_at(panel, yk, &predictors, o - 1, window, tau, method, settings))
        .collect();
    Ok(ForecastRun {
        target: target.to_string(),
        tau: tau.value(),
        window,
        method,
        series: predictors.iter().map(|&k| panel.names[k].clone()).collect(),
        records,
    })
}

/// One forecast from 0-based origin row `i`.
#[allow(clippy::too_many_arguments)]
fn forecast_at(
    panel: &TransformedPanel,
    yk: usize,
    predictors: &[usize],
    i: usize,
    window: usize,
    tau: QuantileLevel,
    method: Method,
    settings: &ForecastSettings,
) -> ForecastRecord {
    let realized = panel.values[yk][i + 1];
    let mut record = ForecastRecord {
        origin: panel.dates[i],
        target_date: panel.dates[i + 1],
        selected: Vec::new(),
        prediction: None,
        realized,
        loss: None,
        error: None,
    };
    match fit_and_predict(panel, yk, predictors, i, window, tau, method, settings) {
        Ok((selected, pred)) => {
            record.selected = selected;
            record.prediction = Some(pred);
            record.loss = realized.map(|r| check_loss(r - pred, tau.value()));
            if realized.is_none() {
                record.error = Some("realized value is missing".into());
            }
        }
        Err(e) => record.error = Some(e.to_string()),
    }
    record
}

#[allow(clippy::too_many_arguments)]
fn fit_and_predict(
    panel: &TransformedPanel,
    yk: usize,
    predictors: &[usize],
    i: usize,
    window: usize,
    tau: QuantileLevel,
    method: Method,
    settings: &ForecastSettings,
) -> Result<(Vec<String>, f64)> {
    let start = i + 1 - window;
    let rows = start..i;
    let y: Vec<f64> = (start + 1..=i)
        .map(|t| panel.values[yk][t])
        .collect::<Option<_>>()
        .ok_or_else(|| QpcError::InvalidDataset("target has missing values in the window".into()))?;
    let mut cols = Vec::new();
    let mut names = Vec::new();
    let mut origin_row = Vec::new();
    for &k in predictors {
        let v = &panel.values[k];
        let col: Option<Vec<f64>> = rows.clone().map(|t| v[t]).collect();
        if let (Some(col), Some(x_o)) = (col, v[i]) {
            cols.push(col);
            names.push(panel.names[k].clone());
            origin_row.push(x_o);
        }
    }
    if cols.is_empty() {
        return Err(QpcError::InvalidDataset("no complete predictors in the window".into()));
    }
    if settings.standardize {
        for (col, x_o) in cols.iter_mut().zip(origin_row.iter_mut()) {
            let (mean, var) = mean_var(col);
            let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
            col.iter_mut().for_each(|v| *v = (*v - mean) / sd);
            *x_o = (*x_o - mean) / sd;
        }
    }
    let ds = Dataset::new(y, cols, names)?;
    let sel = select(method, &ds, tau, &settings.method)?;
    let pred = sel.predict_row(method, &origin_row);
    Ok((sel.selected.iter().map(|&j| ds.name(j).to_string()).collect(), pred))
}

/// Inclusive range of forecast target dates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DateFilter {
    pub start: Quarter,
    pub end: Quarter,
}

impl DateFilter {
    pub fn contains(&self, q: Quarter) -> bool {
        self.start <= q && q <= self.end
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrequencyRow {
    pub rank: usize,
    pub name: String,
    pub count: usize,
    #[serde(serialize_with = "sig6")]
    pub freq: f64,
}

/// Records whose target date passes the filter (all records without one).
fn filtered<'a>(run: &'a ForecastRun, filter: Option<&DateFilter>) -> Vec<&'a ForecastRecord> {
    run.records
        .iter()
        .filter(|r| filter.is_none_or(|f| f.contains(r.target_date)))
        .collect()
}

/// Share of filtered origins at which each variable was selected, sorted by
/// descending frequency then name; only variables selected at least once are
/// listed. Failed origins count in the denominator.
pub fn frequency_table(run: &ForecastRun, top_k: Option<usize>, filter: Option<&DateFilter>) -> Result<Vec<FrequencyRow>> {
    let recs = filtered(run, filter);
    if recs.is_empty() {
        return Err(QpcError::EmptyFilter);
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &recs {
        for name in &r.selected {
            *counts.entry(name.as_str()).or_default() += 1;
        }
    }
    let mut rows: Vec<(&str, usize)> = counts.into_iter().collect();
    rows.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let total = recs.len() as f64;
    Ok(rows
        .into_iter()
        .take(top_k.unwrap_or(usize::MAX))
        .enumerate()
        .map(|(i, (name, count))| FrequencyRow {
            rank: i + 1,
            name: name.to_string(),
            count,
            freq: count as f64 / total,
        })
        .collect())
}

/// `(times selected, origins)` for one predictor over the filtered records.
pub fn inclusion_check(run: &ForecastRun, name: &str, filter: Option<&DateFilter>) -> Result<(usize, usize)> {
    if !run.series.iter().any(|s| s == name) {
        return Err(QpcError::UnknownSeries(name.to_string()));
    }
    let recs = filtered(run, filter);
    let hits = recs.iter().filter(|r| r.selected.iter().any(|s| s == name)).count();
    Ok((hits, recs.len()))
}

/// CSV with columns `rank,name,freq`.
pub fn frequency_csv(rows: &[FrequencyRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| QpcError::Io(e.to_string());
    w.write_record(["rank", "name", "freq"]).map_err(io)?;
    for r in rows {
        w.write_record([r.rank.to_string(), r.name.clone(), crate::report::format_sig(r.freq)])
            .map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| QpcError::Io(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| QpcError::Io(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn panel_csv(rows: usize, series: usize, seed: u64) -> String {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = String::from("sasdate,GDP");
        for k in 0..series {
            out.push_str(&format!(",X{k}"));
        }
        out.push_str("\ntransform,1");
        for _ in 0..series {
            out.push_str(",1");
        }
        out.push('\n');
        let mut x = vec![0.0; series];
        for t in 0..rows {
            let q = Quarter(1959 * 4 + t as i32);
            let gdp = if t == 0 { 0.0 } else { 0.8 * x[0] + 0.3 * rng.sample::<f64, _>(StandardNormal) };
            for v in x.iter_mut() {
                *v = 0.5 * *v + rng.sample::<f64, _>(StandardNormal);
            }
            out.push_str(&format!("{q},{gdp}"));
            for v in &x {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }

    fn tau(t: f64) -> QuantileLevel {
        QuantileLevel::new(t).unwrap()
    }

    #[test]
    fn quarter_formats() {
        for s in ["2007Q3", "2007-08-01", "8/1/2007", "2007q3"] {
            assert_eq!(s.parse::<Quarter>().unwrap(), Quarter::new(2007, 3), "{s}");
        }
        assert_eq!(Quarter::new(2007, 3).to_string(), "2007Q3");
        assert_eq!(Quarter::new(2007, 4).next().to_string(), "2008Q1");
        assert!("2007Q5".parse::<Quarter>().is_err());
        assert!("13/1/2007".parse::<Quarter>().is_err());
    }

    #[test]
    fn toy_panel_keeps_codes() {
        let text = "sasdate,A,B,C\nfactors,1,0,1\ntransform,1,5,2\n1/1/2000,1,2,3\n4/1/2000,NA,2.5,4\n7/1/2000,3,3,\n";
        let p = parse_panel(text.as_bytes()).unwrap();
        assert_eq!(p.names, ["A", "B", "C"]);
        assert_eq!(p.tcodes, [Tcode::Level, Tcode::DiffLog, Tcode::Diff]);
        assert_eq!(p.dates[1].to_string(), "2000Q2");
        assert_eq!(p.values[0][1], None);
        assert_eq!(p.values[2][2], None);
        assert_eq!(p.incomplete_rows(), [1, 2]);
    }

    #[test]
    fn malformed_cell_names_location() {
        let text = "date,A,B\ntransform,1,1\n2000Q1,1,2\n2000Q2,1,x2\n";
        match parse_panel(text.as_bytes()) {
            Err(QpcError::Parse { row, column, .. }) => assert_eq!((row, column), (4, 3)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn error_rows_are_file_lines() {
        let text = "date,A\n\ntransform,1\n\n2000Q1,1\n2000Q2,oops\n";
        match parse_panel(text.as_bytes()) {
            Err(QpcError::Parse { row, column, .. }) => assert_eq!((row, column), (6, 2)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_bad_headers_and_codes() {
        let dup = "date,A,A\ntransform,1,1\n2000Q1,1,2\n";
        assert!(matches!(parse_panel(dup.as_bytes()), Err(QpcError::InvalidDataset(_))));
        let code = "date,A,B\ntransform,1,8\n2000Q1,1,2\n";
        assert_eq!(
            parse_panel(code.as_bytes()),
            Err(QpcError::UnknownTcode { series: "B".into(), code: 8 })
        );
        let order = "date,A\ntransform,1\n2000Q2,1\n2000Q1,2\n";
        assert!(matches!(parse_panel(order.as_bytes()), Err(QpcError::InvalidDataset(_))));
        let no_tc = "date,A\n2000Q1,1\n";
        assert!(matches!(parse_panel(no_tc.as_bytes()), Err(QpcError::Parse { row: 2, .. })));
        let ragged = "date,A,B\ntransform,1,1\n2000Q1,1\n";
        assert!(matches!(parse_panel(ragged.as_bytes()), Err(QpcError::Parse { row: 3, .. })));
    }

    fn single(code: Tcode, x: &[f64]) -> MacroPanel {
        let dates = (0..x.len()).map(|t| Quarter(8000 + t as i32)).collect();
        MacroPanel::new(dates, vec!["s".into()], vec![code], vec![x.iter().map(|&v| Some(v)).collect()]).unwrap()
    }

    #[test]
    fn transform_examples() {
        let t = apply_tcodes(&single(Tcode::DiffLog, &[3.0; 6])).unwrap();
        assert_eq!(t.len(), 5);
        assert!(t.values[0].iter().all(|v| *v == Some(0.0)));

        let e = std::f64::consts::E;
        let t = apply_tcodes(&single(Tcode::Log, &[1.0, e, e * e])).unwrap();
        let got: Vec<f64> = t.values[0].iter().map(|v| v.unwrap()).collect();
        for (g, want) in got.iter().zip([0.0, 1.0, 2.0]) {
            assert!((g - want).abs() < 1e-15);
        }

        let geo: Vec<f64> = (0..8).map(|t| 2f64.powi(t)).collect();
        let t = apply_tcodes(&single(Tcode::DiffLog, &geo)).unwrap();
        for v in &t.values[0] {
            assert!((v.unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn every_code_by_hand() {
        let x = [2.0, 3.0, 5.0, 4.0, 7.0];
        let l: Vec<f64> = x.iter().map(|v: &f64| v.ln()).collect();
        let cases: Vec<(Tcode, Vec<f64>)> = vec![
            (Tcode::Level, x.to_vec()),
            (Tcode::Diff, vec![1.0, 2.0, -1.0, 3.0]),
            (Tcode::Diff2, vec![1.0, -3.0, 4.0]),
            (Tcode::Log, l.clone()),
            (Tcode::DiffLog, (1..5).map(|t| l[t] - l[t - 1]).collect()),
            (Tcode::Diff2Log, (2..5).map(|t| l[t] - 2.0 * l[t - 1] + l[t - 2]).collect()),
            (Tcode::DiffPctChange, (2..5).map(|t| x[t] / x[t - 1] - x[t - 1] / x[t - 2]).collect()),
        ];
        for (code, want) in cases {
            let dates = (0..5).map(Quarter).collect();
            let p = MacroPanel::new(dates, vec!["s".into()], vec![code], vec![x.iter().map(|&v| Some(v)).collect()]).unwrap();
            let full = transform(&p.values[0], code);
            let got: Vec<f64> = full[code.lag()..].iter().map(|v| v.unwrap()).collect();
            assert_eq!(got.len(), want.len(), "{code:?}");
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12, "{code:?}: {g} vs {w}");
            }
        }
    }

    #[test]
    fn trim_aligns_all_series() {
        let text = "date,A,B,C\ntransform,1,2,6\n2000Q1,1,1,1\n2000Q2,2,2,2\n2000Q3,3,4,4\n2000Q4,4,8,8\n";
        let t = apply_tcodes(&parse_panel(text.as_bytes()).unwrap()).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.dates[0].to_string(), "2000Q3");
        assert!(t.values.iter().all(|v| v.len() == 2));
        assert_eq!(t.values[0], [Some(3.0), Some(4.0)]);
        assert_eq!(t.values[1], [Some(2.0), Some(4.0)]);
    }

    #[test]
    fn log_of_nonpositive_is_rejected() {
        assert_eq!(
            apply_tcodes(&single(Tcode::DiffLog, &[1.0, 0.0, 2.0])),
            Err(QpcError::NonPositiveForLog { series: "s".into() })
        );
    }

    fn transformed(rows: usize, series: usize, seed: u64) -> TransformedPanel {
        apply_tcodes(&parse_panel(panel_csv(rows, series, seed).as_bytes()).unwrap()).unwrap()
    }

    #[test]
    fn record_count_law() {
        let t = transformed(30, 4, 1);
        for l in [10, 20, 29] {
            let run = rolling_forecast(&t, "GDP", tau(0.5), l, Method::Qpcfr, &ForecastSettings::default()).unwrap();
            assert_eq!(run.records.len(), 30 - l);
            assert!(run.records.iter().all(|r| r.target_date == r.origin.next()));
        }
        let last = rolling_forecast(&t, "GDP", tau(0.5), 29, Method::Qpcfr, &ForecastSettings::default()).unwrap();
        assert_eq!(last.records[0].target_date, *t.dates.last().unwrap());
        assert!(rolling_forecast(&t, "GDP", tau(0.5), 30, Method::Qpcfr, &ForecastSettings::default()).is_err());
        assert_eq!(
            rolling_forecast(&t, "nope", tau(0.5), 10, Method::Qpcfr, &ForecastSettings::default()).unwrap_err(),
            QpcError::UnknownSeries("nope".into())
        );
    }

    #[test]
    fn forecasts_use_lagged_predictors_and_exclude_target() {
        let t = transformed(40, 5, 2);
        let run = rolling_forecast(&t, "GDP", tau(0.5), 30, Method::Qpcfr, &ForecastSettings::default()).unwrap();
        assert!(!run.series.contains(&"GDP".to_string()));
        for r in &run.records {
            assert!(r.error.is_none(), "{:?}", r.error);
            assert!(!r.selected.contains(&"GDP".to_string()));
            assert!(r.selected.contains(&"X0".to_string()), "{:?}", r.selected);
            let loss = check_loss(r.realized.unwrap() - r.prediction.unwrap(), 0.5);
            assert!((r.loss.unwrap() - loss).abs() < 1e-15);
        }
        let again = rolling_forecast(&t, "GDP", tau(0.5), 30, Method::Qpcfr, &ForecastSettings::default()).unwrap();
        assert_eq!(run, again);
    }

    #[test]
    fn missing_predictor_leaves_window() {
        let mut t = transformed(40, 3, 3);
        let k = t.index_of("X1").unwrap();
        t.values[k][35] = None;
        let run = rolling_forecast(&t, "GDP", tau(0.5), 30, Method::L1qr, &ForecastSettings::default()).unwrap();
        for (o, r) in (30..40).zip(&run.records) {
            let window_touches = (o - 30..o).contains(&35);
            if window_touches {
                assert!(!r.selected.contains(&"X1".to_string()));
            }
            assert!(r.error.is_none());
        }
    }

    fn fake_run(selected: &[&[&str]]) -> ForecastRun {
        let records = selected
            .iter()
            .enumerate()
            .map(|(i, s)| ForecastRecord {
                origin: Quarter(8000 + i as i32),
                target_date: Quarter(8001 + i as i32),
                selected: s.iter().map(|v| v.to_string()).collect(),
                prediction: Some(0.0),
                realized: Some(0.0),
                loss: Some(0.0),
                error: None,
            })
            .collect();
        ForecastRun {
            target: "GDP".into(),
            tau: 0.05,
            window: 80,
            method: Method::Qpcs,
            series: vec!["A".into(), "B".into(), "C".into(), "D".into()],
            records,
        }
    }

    #[test]
    fn frequency_examples() {
        let sel: Vec<&[&str]> = vec![&["A", "B"], &["A"], &["A", "B"], &["A", "C"], &["A", "B"], &["A", "B"], &["A"], &["A", "B"]];
        let run = fake_run(&sel);
        let rows = frequency_table(&run, None, None).unwrap();
        assert_eq!(rows[0].name, "A");
        assert_eq!(rows[0].freq, 1.0);
        assert_eq!(rows[1].name, "B");
        assert_eq!(rows[1].freq, 5.0 / 8.0);
        assert_eq!(rows.len(), 3);
        assert_eq!(frequency_table(&run, Some(100), None).unwrap().len(), 3);
        assert_eq!(frequency_table(&run, Some(1), None).unwrap().len(), 1);
        assert_eq!(inclusion_check(&run, "D", None).unwrap(), (0, 8));
        assert_eq!(inclusion_check(&run, "A", None).unwrap(), (8, 8));
        assert!(matches!(inclusion_check(&run, "Z", None), Err(QpcError::UnknownSeries(_))));
        let none = DateFilter { start: Quarter(1), end: Quarter(2) };
        assert_eq!(frequency_table(&run, None, Some(&none)), Err(QpcError::EmptyFilter));
        let csv = frequency_csv(&rows).unwrap();
        assert_eq!(csv, "rank,name,freq\n1,A,1\n2,B,0.625\n3,C,0.125\n");
    }

    #[test]
    fn ties_sorted_by_name() {
        let run = fake_run(&[&["C", "B"], &["A"]]);
        let rows = frequency_table(&run, None, None).unwrap();
        let names: Vec<&str> = rows.iter().map(|r| r.name.as_str()).collect();
        assert_eq!(names, ["A", "B", "C"]);
    }

    #[test]
    fn filters_recombine() {
        let sel: Vec<&[&str]> = vec![&["A", "B"], &["A"], &["C", "B"], &["A", "C"], &["B"], &["A", "B"]];
        let run = fake_run(&sel);
        let first = DateFilter { start: Quarter(8001), end: Quarter(8003) };
        let second = DateFilter { start: Quarter(8004), end: Quarter(8006) };
        for name in ["A", "B", "C", "D"] {
            let (a, na) = inclusion_check(&run, name, Some(&first)).unwrap();
            let (b, nb) = inclusion_check(&run, name, Some(&second)).unwrap();
            assert_eq!((a + b, na + nb), inclusion_check(&run, name, None).unwrap());
        }
    }

    #[test]
    fn json_rounds_to_six_digits() {
        let mut run = fake_run(&[&["A"]]);
        run.records[0].prediction = Some(1.0 / 3.0);
        let json = run.to_json().unwrap();
        assert!(json.contains("0.333333"), "{json}");
        assert!(!json.contains("0.3333333"));
        assert!(json.contains("\"origin\": \"2000Q1\""));
    }
}
