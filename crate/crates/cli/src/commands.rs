use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use geodiag::controls::{control_suite, Control};
use geodiag::diagnostics::{correlation_table, rank_checkpoints, selection_table};
use geodiag::pipeline::analyze_run;
use geodiag::synth::generate_run;
use geodiag::{CheckpointMetrics, Criterion, MetricsReport, RunManifest, SynthConfig};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::args::{AnalyzeArgs, ControlsArgs, CorrelateArgs, CriterionArg, PlotArgs, RankArgs, SynthArgs};
use crate::tables::{num, opt_int, opt_num, render};
use crate::Outcome;

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn load_report(path: &Path) -> Result<MetricsReport> {
    MetricsReport::load(path).with_context(|| format!("reading metrics {}", path.display()))
}

pub fn analyze(args: AnalyzeArgs) -> Result<Outcome> {
    let manifest = RunManifest::load(&args.manifest)
        .with_context(|| format!("reading manifest {}", args.manifest.display()))?;
    let mut cfg = args.analysis.config();
    cfg.keep_edge_curvature = args.edge_csv.is_some();
    info!("analysing {} checkpoints", manifest.checkpoints.len());
    let analysis = analyze_run(&manifest, &cfg);
    for f in &analysis.failures {
        warn!("checkpoint {} failed: {}", f.checkpoint_id, f.reason);
    }
    let report = MetricsReport::new(cfg, analysis);
    report.save(&args.out)?;
    if let Some(path) = &args.edge_csv {
        write_edge_csv(path, &report.checkpoints)?;
    }
    if report.checkpoints.is_empty() {
        bail!("every checkpoint failed");
    }
    Ok(if report.failures.is_empty() {
        Outcome::Success
    } else {
        Outcome::Partial
    })
}

fn write_edge_csv(path: &Path, run: &[CheckpointMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(["checkpoint_id", "class_id", "i", "j", "kappa"])?;
    for c in run {
        for (class_id, m) in &c.per_class {
            for &(i, j, kappa) in &m.curvature.per_edge {
                w.write_record([
                    c.checkpoint_id.clone(),
                    class_id.to_string(),
                    i.to_string(),
                    j.to_string(),
                    kappa.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct RankedRow<'a> {
    rank: usize,
    checkpoint_id: &'a str,
    epoch: Option<i64>,
    tau: f64,
    mean_kappa: f64,
    geoscore: Option<f64>,
    ood_accuracy: Option<f64>,
}

#[derive(Debug, Serialize)]
struct RankOutput<'a> {
    ranked_by: Criterion,
    ranking: Vec<RankedRow<'a>>,
    selections: Vec<geodiag::SelectionRow>,
}

pub fn rank(args: RankArgs) -> Result<Outcome> {
    let report = load_report(&args.metrics)?;
    let run = &report.checkpoints;
    if run.is_empty() {
        bail!("metrics file has no checkpoints");
    }
    let has_geoscore = run.iter().all(|c| c.geoscore.is_some());
    let criteria: Vec<Criterion> = match args.criterion {
        CriterionArg::All => Criterion::ALL
            .into_iter()
            .filter(|&c| c != Criterion::Geoscore || has_geoscore)
            .collect(),
        CriterionArg::TorsionOnly => vec![Criterion::TorsionOnly],
        CriterionArg::CurvatureOnly => vec![Criterion::CurvatureOnly],
        CriterionArg::Geoscore => vec![Criterion::Geoscore],
        CriterionArg::Oracle => {
            if let Some(c) = run.iter().find(|c| c.ood_accuracy.is_none()) {
                bail!("oracle criterion needs accuracy for every checkpoint; '{}' has none", c.checkpoint_id);
            }
            vec![Criterion::Oracle]
        }
    };
    let ranked_by = match args.criterion {
        CriterionArg::All if has_geoscore => Criterion::Geoscore,
        CriterionArg::All => Criterion::TorsionOnly,
        _ => criteria[0],
    };
    let order = rank_checkpoints(run, ranked_by)?;
    let ranking: Vec<RankedRow> = order
        .iter()
        .enumerate()
        .map(|(r, &i)| RankedRow {
            rank: r + 1,
            checkpoint_id: &run[i].checkpoint_id,
            epoch: run[i].epoch,
            tau: run[i].tau,
            mean_kappa: run[i].mean_kappa,
            geoscore: run[i].geoscore,
            ood_accuracy: run[i].ood_accuracy,
        })
        .collect();
    let selections = selection_table(run, &criteria)?;
    let out = RankOutput {
        ranked_by,
        ranking,
        selections,
    };
    let text = if args.json {
        serde_json::to_string_pretty(&out)? + "\n"
    } else {
        let rows: Vec<Vec<String>> = out
            .ranking
            .iter()
            .map(|r| {
                vec![
                    format!("{}{}", r.rank, if r.rank == 1 { "*" } else { "" }),
                    r.checkpoint_id.to_string(),
                    opt_int(r.epoch),
                    num(r.tau),
                    num(r.mean_kappa),
                    opt_num(r.geoscore),
                    opt_num(r.ood_accuracy),
                ]
            })
            .collect();
        let sel: Vec<Vec<String>> = out
            .selections
            .iter()
            .map(|s| vec![s.selector.clone(), opt_int(s.epoch), s.checkpoint_id.clone(), opt_num(s.accuracy)])
            .collect();
        format!(
            "Ranked by {}\n{}\n{}",
            ranked_by.label(),
            render(&["Rank", "Checkpoint", "Epoch", "Tau", "MeanKappa", "GeoScore", "Acc"], &rows),
            render(&["Selector", "Epoch", "Ckpt", "Acc"], &sel)
        )
    };
    emit(args.out.as_deref(), &text)?;
    Ok(Outcome::Success)
}

#[derive(Debug, Deserialize)]
struct AccuracyRecord {
    checkpoint_id: String,
    ood_accuracy: f64,
}

fn read_accuracy_csv(path: &Path) -> Result<Vec<(String, f64)>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["checkpoint_id", "ood_accuracy"] {
        bail!("{}: header must be checkpoint_id,ood_accuracy", path.display());
    }
    r.deserialize::<AccuracyRecord>()
        .map(|rec| {
            let rec = rec.with_context(|| format!("parsing {}", path.display()))?;
            Ok((rec.checkpoint_id, rec.ood_accuracy))
        })
        .collect()
}

pub fn correlate(args: CorrelateArgs) -> Result<Outcome> {
    let report = load_report(&args.metrics)?;
    let targets = match &args.accuracy {
        Some(p) => read_accuracy_csv(p)?,
        None => report
            .checkpoints
            .iter()
            .filter_map(|c| c.ood_accuracy.map(|a| (c.checkpoint_id.clone(), a)))
            .collect(),
    };
    let table = correlation_table(&report.checkpoints, &targets, "ood_accuracy", args.method.into())?;
    for id in &table.join.unknown_ids {
        warn!("accuracy row '{id}' matches no checkpoint");
    }
    for id in &table.join.missing_ids {
        warn!("checkpoint '{id}' has no accuracy; left out");
    }
    for (metric, reason) in &table.skipped {
        warn!("{metric} skipped: {reason}");
    }
    let text = if args.json {
        serde_json::to_string_pretty(&table)? + "\n"
    } else {
        let rows: Vec<Vec<String>> = table
            .rows
            .iter()
            .map(|r| vec![r.metric_name.clone(), num(r.rho), format!("{:.3e}", r.p_value), r.n.to_string()])
            .collect();
        let rho = match args.method {
            crate::args::MethodArg::Spearman => "Spearman rho",
            crate::args::MethodArg::Kendall => "Kendall tau-b",
        };
        render(&["Metric", rho, "p", "n"], &rows)
    };
    emit(args.out.as_deref(), &text)?;
    Ok(if table.join.unknown_ids.is_empty() && table.join.missing_ids.is_empty() {
        Outcome::Success
    } else {
        Outcome::Partial
    })
}

pub fn controls(args: ControlsArgs) -> Result<Outcome> {
    let controls: Vec<Control> = if args.control == "all" {
        Control::STANDARD.to_vec()
    } else {
        args.control
            .split(',')
            .map(|s| s.trim().parse::<Control>().map_err(anyhow::Error::msg))
            .collect::<Result<_>>()?
    };
    let manifest = RunManifest::load(&args.manifest)
        .with_context(|| format!("reading manifest {}", args.manifest.display()))?;
    let cfg = args.analysis.config();
    let rows = control_suite(&manifest, &cfg, &args.control_config(), &controls)?;
    let text = if args.json {
        serde_json::to_string_pretty(&rows)? + "\n"
    } else if args.out.is_some() {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &rows {
            w.serialize(r)?;
        }
        String::from_utf8(w.into_inner()?)?
    } else {
        let body: Vec<Vec<String>> = rows
            .iter()
            .map(|r| vec![r.control.clone(), r.metric.clone(), num(r.rho_original), num(r.rho_control)])
            .collect();
        render(&["Control", "Metric", "RhoOriginal", "RhoControl"], &body)
    };
    emit(args.out.as_deref(), &text)?;
    Ok(Outcome::Success)
}

pub fn synth(args: SynthArgs) -> Result<Outcome> {
    let mut cfg = SynthConfig::linear(args.checkpoints, args.seed);
    if let Some(v) = args.classes {
        cfg.n_classes = v;
    }
    if let Some(v) = args.per_class {
        cfg.n_per_class = v;
    }
    if let Some(v) = args.dim {
        cfg.dim = v;
    }
    if let Some(v) = args.separation {
        cfg.separation = v;
    }
    if let Some(s) = args.schedule {
        cfg.coherence_schedule = s;
    }
    let manifest = generate_run(&cfg, &args.out)?;
    println!(
        "wrote {} checkpoints to {}",
        manifest.checkpoints.len(),
        args.out.join("manifest.json").display()
    );
    Ok(Outcome::Success)
}

fn lookup(c: &CheckpointMetrics, name: &str) -> Result<Option<f64>> {
    match name {
        "ood_accuracy" => return Ok(c.ood_accuracy),
        "epoch" => return Ok(c.epoch.map(|e| e as f64)),
        _ => {}
    }
    c.scalar_metrics()
        .into_iter()
        .find(|(n, _)| n == name)
        .map(|(_, v)| v)
        .with_context(|| format!("unknown metric '{name}'"))
}

pub fn plot_data(args: PlotArgs) -> Result<Outcome> {
    let report = load_report(&args.metrics)?;
    let mut w = csv::Writer::from_path(&args.out).with_context(|| format!("writing {}", args.out.display()))?;
    w.write_record(["checkpoint_id", "x", "y", "color"])?;
    let cell = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
    for c in &report.checkpoints {
        w.write_record([
            c.checkpoint_id.clone(),
            cell(lookup(c, &args.x)?),
            cell(lookup(c, &args.y)?),
            cell(lookup(c, &args.color)?),
        ])?;
    }
    w.flush()?;
    Ok(Outcome::Success)
}
