//! Pipeline stages. Each stage reads its inputs from files under the output
//! directory and writes into its own subdirectory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use eqdisc::baseline::{bootstrap_discover, BaselineReport};
use eqdisc::bayesnet::{
    fit_parameters, learn_structure, render_summary, sample_systems, structures, summarize, BayesianNetwork,
    SampledSystem, Structure,
};
use eqdisc::compare::{coefficient_errors, render_table, ErrorRow, LvCoefficients};
use eqdisc::dataio::{load_csv_as, DataSet};
use eqdisc::ensemble::{collect, pool, read_ensemble, write_ensemble, TermTable};
use eqdisc::evolution::{evolve, front_to_json};
use eqdisc::solver::{envelope, solve_samples};
use eqdisc::tokens::TokenConfig;
use eqdisc::{Error, Result};

use crate::config::RunConfig;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Creates `<output_dir>/<stage>` with the resolved config and version.
fn stage_dir(cfg: &RunConfig, stage: &str) -> Result<PathBuf> {
    let dir = cfg.output_dir().join(stage);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_text(&dir.join("config.resolved"), &cfg.resolved())?;
    write_text(&dir.join("VERSION"), &format!("eqdisc {VERSION}\n"))?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, hint: &str) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|_| Error::InsufficientData(format!("{} is missing; run `{hint}` first", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

/// The configured data with derivatives, optionally normalized.
pub fn load_data(cfg: &RunConfig) -> Result<DataSet> {
    let cols = cfg.columns()?;
    let pairs: Vec<(&str, &str)> = cols.iter().map(|(c, v)| (c.as_str(), v.as_str())).collect();
    let data = load_csv_as(&cfg.data_path(), &cfg.time_column(), &pairs)?;
    let data = data.with_all_derivatives(&cfg.diff()?)?;
    if cfg.normalize() {
        data.normalize_dispersion()
    } else {
        Ok(data)
    }
}

fn evo_config(cfg: &RunConfig, data: &DataSet) -> Result<eqdisc::evolution::EvoConfig> {
    let ec = cfg.evo(TokenConfig::for_data(data, cfg.max_order()?))?;
    ec.validate()?;
    Ok(ec)
}

fn scales_note(data: &DataSet) -> String {
    let mut s = String::new();
    for (v, k) in data.scales() {
        let _ = writeln!(s, "# {v} divided by {k:.6}");
    }
    s
}

/// One evolutionary run per variable; writes `front_<var>.json`.
pub fn discover(cfg: &RunConfig) -> Result<String> {
    let data = load_data(cfg)?;
    let ec = evo_config(cfg, &data)?;
    let dir = stage_dir(cfg, "discover")?;
    let mut report = scales_note(&data);
    for var in data.variables().to_vec() {
        let front = evolve(&data, &ec, &var)?;
        let members = front_to_json(&front, &var);
        write_json(&dir.join(format!("front_{var}.json")), &members)?;
        for m in &members {
            let _ = writeln!(report, "{}  [complexity {}, residual {:.6}]", m.text, m.complexity, m.quality);
        }
    }
    write_text(&dir.join("equations.txt"), &report)?;
    Ok(report)
}

/// Repeated discovery; writes per-variable ensembles and the pooled table.
pub fn ensemble(cfg: &RunConfig) -> Result<String> {
    let data = load_data(cfg)?;
    let ec = evo_config(cfg, &data)?;
    let n = cfg.ensemble_runs()?;
    let dir = stage_dir(cfg, "ensemble")?;
    let mut ensembles = Vec::new();
    let mut report = String::new();
    for var in data.variables().to_vec() {
        let ens = collect(&data, n, &ec, &var)?;
        write_ensemble(&ens, &dir.join(format!("ensemble_{var}.json")))?;
        let _ = writeln!(
            report,
            "{var}: {} equations from {} runs, skipped runs {:?}",
            ens.len(),
            ens.runs.len(),
            ens.skipped
        );
        ensembles.push(ens);
    }
    let (table, dropped) = pool(&ensembles)?.filter_support(cfg.min_support()?);
    table.write_csv(&dir.join("table.csv"))?;
    write_text(&dir.join("noise_candidates.txt"), &dropped.iter().map(|k| format!("{k}\n")).collect::<String>())?;
    let _ = writeln!(
        report,
        "pooled table: {} rows, {} columns, {} dropped as noise candidates",
        table.rows(),
        table.columns.len(),
        dropped.len()
    );
    write_text(&dir.join("report.txt"), &report)?;
    Ok(report)
}

fn read_table(cfg: &RunConfig) -> Result<TermTable> {
    let path = cfg.output_dir().join("ensemble").join("table.csv");
    if !path.exists() {
        return Err(Error::InsufficientData(format!(
            "no term table at {}; run `ensemble` first",
            path.display()
        )));
    }
    let table = TermTable::read_csv(&path)?;
    if table.rows() == 0 {
        return Err(Error::InsufficientData(format!("{} has no rows", path.display())));
    }
    Ok(table)
}

/// Structure and parameter learning on the pooled table.
pub fn bnet(cfg: &RunConfig) -> Result<String> {
    let table = read_table(cfg)?;
    let dag = learn_structure(&table, cfg.max_parents()?)?;
    let bn = fit_parameters(&dag, &table)?;
    let dir = stage_dir(cfg, "bnet")?;
    bn.write_json(&dir.join("network.json"))?;
    write_text(&dir.join("network.dot"), &dag.to_dot())?;
    let comps = dag.components();
    let mut report = format!(
        "{} nodes, {} edges, {} components\n",
        dag.nodes.len(),
        dag.edges().len(),
        comps.len()
    );
    for (p, c) in dag.edges() {
        let _ = writeln!(report, "{} -> {}", dag.nodes[p], dag.nodes[c]);
    }
    write_text(&dir.join("report.txt"), &report)?;
    // Sanity check that the stored network reads back.
    BayesianNetwork::read_json(&dir.join("network.json"))?;
    Ok(report)
}

#[derive(Serialize)]
struct SolveReport<'a> {
    samples: usize,
    solved: usize,
    failures: &'a [(usize, String)],
    containment: Vec<(String, f64)>,
}

/// Samples systems from the network, summarizes and integrates them.
pub fn sample_solve(cfg: &RunConfig) -> Result<String> {
    let bn_path = cfg.output_dir().join("bnet").join("network.json");
    if !bn_path.exists() {
        return Err(Error::InsufficientData(format!(
            "no network at {}; run `bnet` first",
            bn_path.display()
        )));
    }
    let bn = BayesianNetwork::read_json(&bn_path)?;
    let data = load_data(cfg)?;
    let anchors = cfg.anchors()?;
    let exec = cfg.execution();
    let samples = sample_systems(&bn, &anchors, cfg.samples()?, cfg.seed()?, exec)?;
    let summary = summarize(&samples)?;
    let groups = structures(&samples);
    let dir = stage_dir(cfg, "sample_solve")?;
    write_json(&dir.join("samples.json"), &samples)?;
    write_json(&dir.join("summary.json"), &summary)?;
    write_json(&dir.join("structures.json"), &groups)?;

    let mut text = String::from("# marginal over samples [presence]\n");
    text.push_str(&render_summary(&summary, &anchors));
    text.push_str("\n# sampled structures\n");
    for s in &groups {
        let _ = writeln!(text, "{} x{}: {}", s.variable, s.count, render_structure(s));
    }

    let vars: Vec<String> = data.variables().to_vec();
    let y0: Vec<f64> = vars.iter().map(|v| data.channel(v).unwrap()[0]).collect();
    let grid = data.grid();
    let span = cfg.t_span()?.unwrap_or((grid[0], grid[grid.len() - 1]));
    let batch = solve_samples(&samples, data.time_name(), &y0, span, cfg.report_points()?, &cfg.solve()?, exec);
    let traj_dir = dir.join("trajectories");
    fs::create_dir_all(&traj_dir).map_err(|e| Error::io(&traj_dir, e))?;
    for (i, tr) in &batch.trajectories {
        tr.write_csv(&traj_dir.join(format!("sample_{i:03}.csv")), data.time_name())?;
    }
    let mut containment = Vec::new();
    if !batch.trajectories.is_empty() {
        let trajs: Vec<_> = batch.trajectories.iter().map(|(_, t)| t.clone()).collect();
        let env = envelope(&trajs, batch.failures.len())?;
        env.write_csv(&dir.join("envelope.csv"), data.time_name())?;
        write_text(&dir.join("envelope.svg"), &env.to_svg(Some(&data)))?;
        containment = env.variables.iter().cloned().zip(env.containment(&data)).collect();
    }
    let _ = writeln!(
        text,
        "\n# solved {} of {} samples over [{}, {}]",
        batch.trajectories.len(),
        samples.len(),
        span.0,
        span.1
    );
    for (v, c) in &containment {
        let _ = writeln!(text, "# data inside envelope for {v}: {:.1}%", 100.0 * c);
    }
    write_json(
        &dir.join("solve_report.json"),
        &SolveReport {
            samples: samples.len(),
            solved: batch.trajectories.len(),
            failures: &batch.failures,
            containment,
        },
    )?;
    write_text(&dir.join("summary.txt"), &text)?;
    Ok(text)
}

fn render_structure(s: &Structure) -> String {
    s.terms
        .iter()
        .map(|t| format!("{}*{}", t.render(), t.key))
        .collect::<Vec<_>>()
        .join(" + ")
}

/// Fixed-library bootstrap baseline.
pub fn baseline(cfg: &RunConfig) -> Result<String> {
    let data = load_data(cfg)?;
    let settings = cfg.baseline()?;
    let report = bootstrap_discover(&data, data.variables(), &settings, cfg.seed()?, cfg.execution())?;
    let dir = stage_dir(cfg, "baseline")?;
    write_json(&dir.join("report.json"), &report)?;
    let mut text = scales_note(&data);
    text.push_str(&report.render());
    write_text(&dir.join("report.txt"), &text)?;
    Ok(text)
}

#[derive(Serialize)]
struct CompareDoc {
    reference: LvCoefficients,
    fitted: Vec<(String, LvCoefficients)>,
    errors: Vec<ErrorRow>,
}

/// Percentage errors of the sampled base system and of the baseline
/// against the reference coefficients.
pub fn compare(cfg: &RunConfig) -> Result<String> {
    let vars = cfg.variables()?;
    let reference = cfg.reference()?;
    let out = cfg.output_dir();
    let mut fitted = Vec::new();
    let st = out.join("sample_solve").join("structures.json");
    if st.exists() {
        let groups: Vec<Structure> = read_json(&st, "sample-solve")?;
        fitted.push(("evolutionary".to_string(), LvCoefficients::from_structures(&groups, &vars)?));
    }
    let bl = out.join("baseline").join("report.json");
    if bl.exists() {
        let report: BaselineReport = read_json(&bl, "baseline")?;
        fitted.push(("baseline".to_string(), LvCoefficients::from_baseline(&report, &vars)?));
    }
    if fitted.is_empty() {
        return Err(Error::InsufficientData(format!(
            "nothing to compare under {}; run `sample-solve` or `baseline` first",
            out.display()
        )));
    }
    let errors: Vec<ErrorRow> = fitted.iter().map(|(s, c)| coefficient_errors(s, c, &reference)).collect();
    let dir = stage_dir(cfg, "compare")?;
    let table = render_table(&errors);
    write_text(&dir.join("table.csv"), &table)?;
    write_json(
        &dir.join("table.json"),
        &CompareDoc {
            reference,
            fitted,
            errors,
        },
    )?;
    Ok(table)
}

/// Re-reads sampled systems written by `sample-solve`.
pub fn read_samples(cfg: &RunConfig) -> Result<Vec<SampledSystem>> {
    read_json(&cfg.output_dir().join("sample_solve").join("samples.json"), "sample-solve")
}

/// Re-reads the per-variable ensembles written by `ensemble`.
pub fn read_ensembles(cfg: &RunConfig) -> Result<Vec<eqdisc::ensemble::EquationEnsemble>> {
    cfg.variables()?
        .iter()
        .map(|v| read_ensemble(&cfg.output_dir().join("ensemble").join(format!("ensemble_{v}.json"))))
        .collect()
}
