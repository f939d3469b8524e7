//! Subcommand bodies: load and validate the configuration, run the library,
//! format the result.

use std::path::{Path, PathBuf};

use anyhow::anyhow;
use serde::Serialize;

use qpc_core::macro_app::{apply_tcodes, frequency_csv, frequency_table, inclusion_check, load_panel, rolling_forecast, DateFilter, ForecastSettings};
use qpc_core::report::format_sig;
use qpc_core::simulation::{bench_runtime, run_study, MethodSettings, SimulationReport};
use qpc_core::{screen as run_screen, Dataset, QpcError, QuantileLevel};

use crate::config::{self, parse_methods, BenchConfig, ForecastConfig, Format, ScreenFileConfig, SimulateConfig};
use crate::output::{csv_table, emit, emit_dir, json};
use crate::{Classify, CommonArgs, Failure};

/// Relative paths inside a config file are taken relative to that file.
fn resolve(args: &CommonArgs, path: &Path) -> PathBuf {
    match args.config.as_deref().and_then(Path::parent) {
        Some(dir) if path.is_relative() => dir.join(path),
        _ => path.to_path_buf(),
    }
}

/// `--out` wins over the config's `out`.
fn output_path(args: &CommonArgs, from_config: Option<&Path>) -> Option<PathBuf> {
    args.out.clone().or_else(|| from_config.map(|p| resolve(args, p)))
}

fn need_seed(flag: Option<u64>, file: Option<u64>) -> Result<u64, Failure> {
    flag.or(file)
        .ok_or_else(|| anyhow!("a seed is required (--seed or `seed` in the config)"))
        .config()
}

fn settings(lambda_grid: usize) -> Result<MethodSettings, Failure> {
    if lambda_grid < 2 {
        return Err(anyhow!("lambda_grid must be at least 2")).config();
    }
    Ok(MethodSettings { lambda_grid })
}

pub fn simulate(args: &CommonArgs) -> Result<(), Failure> {
    let cfg: SimulateConfig = config::load(args.config.as_deref(), args.preset.as_deref()).config()?;
    let seed = need_seed(args.seed, cfg.seed)?;
    let methods = parse_methods(&cfg.methods).config()?;
    let method_settings = settings(cfg.lambda_grid)?;
    let cells = cfg.cells(seed).config()?;
    let format = args.format.or(cfg.format).unwrap_or(Format::Csv);
    let out = output_path(args, cfg.out.as_deref());

    let mut reports: Vec<SimulationReport> = Vec::new();
    for spec in &cells {
        reports.extend(run_study(spec, &methods, cfg.replications, &method_settings).runtime()?);
    }
    let text = match format {
        Format::Json => json(&reports).runtime()?,
        Format::Csv => {
            let rows: Vec<Vec<String>> = reports
                .iter()
                .map(|r| {
                    let mut row = vec![
                        format!("{:?}", r.spec.family),
                        r.spec.n.to_string(),
                        r.spec.p.to_string(),
                        format_sig(r.spec.rho),
                        format_sig(r.spec.phi),
                        format_sig(r.spec.tau.value()),
                        r.method.label().to_string(),
                        r.replications.to_string(),
                        r.failed.to_string(),
                        format_sig(r.mqe),
                        r.crate_count.to_string(),
                        format_sig(r.tp),
                        format_sig(r.fp),
                    ];
                    row.extend(r.ranks.iter().map(|s| s.render()));
                    row
                })
                .collect();
            csv_table(
                &["family", "n", "p", "rho", "phi", "tau", "method", "replications", "failed", "mqe", "crate", "tp", "fp", "r1", "r2", "r3", "r4"],
                &rows,
            )
        }
    };
    emit(out.as_deref(), &text).runtime()
}

#[derive(Serialize)]
struct ScreenOutput<'a> {
    trace: &'a qpc_core::SelectionTrace,
    chosen: Vec<&'a str>,
}

pub fn screen(args: &CommonArgs) -> Result<(), Failure> {
    let cfg: ScreenFileConfig = config::load(args.config.as_deref(), args.preset.as_deref()).config()?;
    let input = resolve(args, &cfg.input);
    let file = std::fs::File::open(&input)
        .map_err(|e| anyhow!("opening {}: {e}", input.display()))
        .config()?;
    let ds = match Dataset::from_csv(file, cfg.response.as_deref()) {
        Err(QpcError::UnknownSeries(name)) => return Err(anyhow!("response column {name:?} not found")).config(),
        other => other.runtime()?,
    };
    let screen_cfg = cfg.screen_config(ds.n(), ds.p()).config()?;
    let format = args.format.or(cfg.format).unwrap_or(Format::Csv);
    let out = output_path(args, cfg.out.as_deref());

    let trace = run_screen(&ds, &screen_cfg).runtime()?;
    for f in &trace.failures {
        eprintln!("warning: step {}: candidate {} not scored: {}", f.step, ds.name(f.candidate), f.reason);
    }
    if let Some(step) = trace.stalled_at {
        eprintln!("warning: no candidate could be scored at step {step}; the path stops there");
    }
    let text = match format {
        Format::Json => json(&ScreenOutput {
            trace: &trace,
            chosen: trace.chosen().iter().map(|&j| ds.name(j)).collect(),
        })
        .runtime()?,
        Format::Csv => {
            let rows: Vec<Vec<String>> = trace
                .steps
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    vec![
                        (i + 1).to_string(),
                        s.index.to_string(),
                        s.name.clone(),
                        format_sig(s.score),
                        format_sig(trace.prefix_loss[i]),
                        format_sig(trace.ebic[i]),
                        (i < trace.chosen_d).to_string(),
                    ]
                })
                .collect();
            csv_table(&["step", "index", "name", "score", "prefix_loss", "ebic", "chosen"], &rows)
        }
    };
    emit(out.as_deref(), &text).runtime()
}

#[derive(Serialize)]
struct InclusionRow {
    method: String,
    window: usize,
    filter: String,
    name: String,
    selected: usize,
    total: usize,
}

#[derive(Serialize)]
struct SummaryRow {
    method: String,
    window: usize,
    records: usize,
    failed: usize,
    #[serde(serialize_with = "qpc_core::report::sig6_opt")]
    mean_loss: Option<f64>,
}

pub fn forecast(args: &CommonArgs) -> Result<(), Failure> {
    let cfg: ForecastConfig = config::load(args.config.as_deref(), args.preset.as_deref()).config()?;
    cfg.validate().config()?;
    let format = args.format.or(cfg.format).unwrap_or(Format::Csv);
    let out = output_path(args, cfg.out.as_deref())
        .ok_or_else(|| anyhow!("forecast writes a directory; pass --out or set `out`"))
        .config()?;
    let tau = QuantileLevel::new(cfg.tau).config()?;
    let methods = parse_methods(&cfg.methods).config()?;
    let forecast_settings = ForecastSettings {
        method: settings(cfg.lambda_grid)?,
        standardize: cfg.standardize,
    };

    let panel_path = resolve(args, &cfg.panel);
    if !panel_path.exists() {
        return Err(anyhow!("panel file {} does not exist", panel_path.display())).config();
    }
    let panel = load_panel(&panel_path).runtime()?;
    let transformed = apply_tcodes(&panel).runtime()?;
    if transformed.index_of(&cfg.target).is_none() {
        return Err(anyhow!("target series {:?} is not in the panel", cfg.target)).config();
    }
    for name in &cfg.inclusion {
        if transformed.index_of(name).is_none() || *name == cfg.target {
            return Err(anyhow!("inclusion series {name:?} is not a predictor in the panel")).config();
        }
    }
    let usable = transformed.len();
    if let Some(&l) = cfg.windows.iter().find(|&&l| l < 2 || l >= usable) {
        return Err(anyhow!("window length {l} must lie in 2..{usable} ({usable} usable rows after transforms)")).config();
    }

    let mut filters: Vec<(String, Option<DateFilter>)> = vec![("all".to_string(), None)];
    filters.extend(cfg.filters.iter().map(|f| (f.name.clone(), Some(f.range()))));
    let ext = match format {
        Format::Csv => "csv",
        Format::Json => "json",
    };

    let mut files: Vec<(String, String)> = Vec::new();
    let mut inclusion = Vec::new();
    let mut summary = Vec::new();
    for &method in &methods {
        for &l in &cfg.windows {
            let run = rolling_forecast(&transformed, &cfg.target, tau, l, method, &forecast_settings).runtime()?;
            let stem = format!("{}_l{l}", method.label());
            files.push((format!("{stem}.json"), run.to_json().runtime()?));
            summary.push(SummaryRow {
                method: method.label().to_string(),
                window: l,
                records: run.records.len(),
                failed: run.records.iter().filter(|r| r.error.is_some()).count(),
                mean_loss: run.mean_loss(),
            });
            for (fname, filter) in &filters {
                match frequency_table(&run, cfg.top_k, filter.as_ref()) {
                    Ok(rows) => {
                        let text = match format {
                            Format::Csv => frequency_csv(&rows).runtime()?,
                            Format::Json => json(&rows).runtime()?,
                        };
                        files.push((format!("{stem}_freq_{fname}.{ext}"), text));
                    }
                    Err(QpcError::EmptyFilter) => {
                        eprintln!("warning: filter {fname} selects no forecasts for {stem}; table skipped");
                    }
                    Err(e) => return Err(e).runtime(),
                }
                for name in &cfg.inclusion {
                    let (selected, total) = inclusion_check(&run, name, filter.as_ref()).runtime()?;
                    inclusion.push(InclusionRow {
                        method: method.label().to_string(),
                        window: l,
                        filter: fname.clone(),
                        name: name.clone(),
                        selected,
                        total,
                    });
                }
            }
        }
    }
    match format {
        Format::Csv => {
            let rows: Vec<Vec<String>> = summary
                .iter()
                .map(|s| {
                    vec![
                        s.method.clone(),
                        s.window.to_string(),
                        s.records.to_string(),
                        s.failed.to_string(),
                        s.mean_loss.map_or(String::new(), format_sig),
                    ]
                })
                .collect();
            files.push(("summary.csv".into(), csv_table(&["method", "window", "records", "failed", "mean_loss"], &rows)));
            if !inclusion.is_empty() {
                let rows: Vec<Vec<String>> = inclusion
                    .iter()
                    .map(|r| {
                        vec![
                            r.method.clone(),
                            r.window.to_string(),
                            r.filter.clone(),
                            r.name.clone(),
                            r.selected.to_string(),
                            r.total.to_string(),
                        ]
                    })
                    .collect();
                files.push(("inclusion.csv".into(), csv_table(&["method", "window", "filter", "name", "selected", "total"], &rows)));
            }
        }
        Format::Json => {
            files.push(("summary.json".into(), json(&summary).runtime()?));
            if !inclusion.is_empty() {
                files.push(("inclusion.json".into(), json(&inclusion).runtime()?));
            }
        }
    }
    emit_dir(&out, &files).runtime()
}

pub fn bench(args: &CommonArgs) -> Result<(), Failure> {
    let cfg: BenchConfig = config::load(args.config.as_deref(), args.preset.as_deref()).config()?;
    let seed = need_seed(args.seed, cfg.seed)?;
    let methods = parse_methods(&cfg.methods).config()?;
    let method_settings = settings(cfg.lambda_grid)?;
    let spec = cfg.spec(seed).config()?;
    let format = args.format.or(cfg.format).unwrap_or(Format::Csv);
    let out = output_path(args, cfg.out.as_deref());

    let rows = bench_runtime(&spec, &methods, cfg.replications, &method_settings).runtime()?;
    if rows.iter().all(|r| r.failed == r.replications) {
        return Err(Failure::Runtime(anyhow!("every method failed on every replication")));
    }
    let text = match format {
        Format::Json => json(&rows).runtime()?,
        Format::Csv => {
            let rows: Vec<Vec<String>> = rows
                .iter()
                .map(|r| {
                    vec![
                        r.method.label().to_string(),
                        r.replications.to_string(),
                        r.failed.to_string(),
                        format_sig(r.avg_seconds),
                    ]
                })
                .collect();
            csv_table(&["method", "replications", "failed", "avg_seconds"], &rows)
        }
    };
    emit(out.as_deref(), &text).runtime()
}
