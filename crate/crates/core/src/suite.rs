//! Experiment suites: TOML config parsing, parallel execution over seeds
//! and result files (per-run JSON, step logs, summary CSV, comparison table).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{
    make_scenario, ClassSplit, DomainSpec, ScenarioConfig, ScenarioKind, ShiftSpec,
};
use crate::engine::{run_with_source, source_model, EngineConfig, RunReport};
use crate::error::{Error, Result};
use crate::netcore::ParamSet;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct SuiteFile {
    config_version: u32,
    #[serde(default)]
    seeds: Option<Vec<u64>>,
    #[serde(default)]
    engine: Option<toml::Table>,
    #[serde(default)]
    scenario: Vec<ScenarioEntry>,
    #[serde(default)]
    variant: Vec<VariantEntry>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioEntry {
    name: String,
    kind: ScenarioKind,
    /// `[shared, source_private, target_private]`
    split: [usize; 3],
    input_dim: Option<usize>,
    class_radius: Option<f64>,
    class_std: Option<f64>,
    rotation_plane: Option<[usize; 2]>,
    batch_size: Option<usize>,
    source_samples_per_class: Option<usize>,
    domain: Option<Vec<DomainEntry>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct DomainEntry {
    #[serde(default)]
    rotation_deg: f64,
    #[serde(default)]
    translation: Vec<f64>,
    #[serde(default = "one")]
    scale: f64,
    #[serde(default)]
    noise_std: f64,
    batches: usize,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct VariantEntry {
    name: String,
    #[serde(default)]
    engine: Option<toml::Table>,
}

/// One named (engine, scenario) pairing; it is executed once per seed.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub name: String,
    pub variant: String,
    pub scenario_name: String,
    pub engine: EngineConfig,
    /// `seed` is replaced by each suite seed.
    pub scenario: ScenarioConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSuite {
    pub runs: Vec<RunSpec>,
    pub seeds: Vec<u64>,
}

fn merge(base: &mut toml::Table, over: &toml::Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

fn engine_from(base: &toml::Table, over: Option<&toml::Table>, what: &str) -> Result<EngineConfig> {
    let mut t = toml::Table::try_from(EngineConfig::default())
        .map_err(|e| Error::config("engine", e.to_string()))?;
    merge(&mut t, base);
    if let Some(o) = over {
        merge(&mut t, o);
    }
    let cfg: EngineConfig = toml::Value::Table(t)
        .try_into()
        .map_err(|e: toml::de::Error| Error::config(what, e.message().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn scenario_from(e: &ScenarioEntry) -> Result<ScenarioConfig> {
    let split = ClassSplit::new(e.split[0], e.split[1], e.split[2]);
    let mut s = ScenarioConfig::desk(e.kind, split, 0);
    if let Some(v) = e.input_dim {
        s.input_dim = v;
    }
    if let Some(v) = e.class_radius {
        s.class_radius = v;
    }
    if let Some(v) = e.class_std {
        s.class_std = v;
    }
    if let Some([a, b]) = e.rotation_plane {
        s.rotation_plane = (a, b);
    }
    if let Some(v) = e.batch_size {
        s.batch_size = v;
    }
    if let Some(v) = e.source_samples_per_class {
        s.source_samples_per_class = v;
    }
    if let Some(domains) = &e.domain {
        s.domains = domains
            .iter()
            .map(|d| DomainSpec {
                shift: ShiftSpec {
                    rotation: d.rotation_deg.to_radians(),
                    translation: d.translation.clone(),
                    scale: d.scale,
                    noise_std: d.noise_std,
                },
                batches: d.batches,
            })
            .collect();
    }
    s.validate()
        .map_err(|err| Error::config(format!("scenario.{}", e.name), err.to_string()))?;
    Ok(s)
}

/// Parses and fully validates a suite from TOML text.
pub fn parse_suite(text: &str) -> Result<ExperimentSuite> {
    let file: SuiteFile =
        toml::from_str(text).map_err(|e| Error::config("config", e.message().to_string()))?;
    if file.config_version != CONFIG_VERSION {
        return Err(Error::config(
            "config_version",
            format!(
                "unsupported version {} (expected {CONFIG_VERSION})",
                file.config_version
            ),
        ));
    }
    let base = file.engine.unwrap_or_default();
    let seeds = file.seeds.unwrap_or_else(|| vec![0]);
    if seeds.is_empty() {
        return Err(Error::config("seeds", "at least one seed is required"));
    }

    let scenarios: Vec<(String, ScenarioConfig)> = if file.scenario.is_empty() {
        vec![(
            "opda".to_string(),
            ScenarioConfig::desk(ScenarioKind::Opda, ClassSplit::new(4, 2, 4), 0),
        )]
    } else {
        file.scenario
            .iter()
            .map(|e| Ok((e.name.clone(), scenario_from(e)?)))
            .collect::<Result<_>>()?
    };
    let variants: Vec<(String, EngineConfig)> = if file.variant.is_empty() {
        vec![("full".to_string(), engine_from(&base, None, "engine")?)]
    } else {
        file.variant
            .iter()
            .map(|v| {
                let what = format!("variant.{}", v.name);
                Ok((
                    v.name.clone(),
                    engine_from(&base, v.engine.as_ref(), &what)?,
                ))
            })
            .collect::<Result<_>>()?
    };

    let mut runs = Vec::new();
    let mut names = HashSet::new();
    for (vname, engine) in &variants {
        for (sname, scenario) in &scenarios {
            let name = format!("{vname}-{sname}");
            if !names.insert(name.clone()) {
                return Err(Error::config(
                    "variant",
                    format!("duplicate run name `{name}`"),
                ));
            }
            runs.push(RunSpec {
                name,
                variant: vname.clone(),
                scenario_name: sname.clone(),
                engine: engine.clone(),
                scenario: scenario.clone(),
            });
        }
    }
    Ok(ExperimentSuite { runs, seeds })
}

pub fn parse_config(path: &Path) -> Result<ExperimentSuite> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_suite(&text)
}

/// One line of `summary.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub name: String,
    pub variant: String,
    pub scenario: String,
    pub seed: u64,
    pub status: String,
    pub metric: String,
    pub n_domains: usize,
    /// Per-domain metric values joined with `;`.
    pub per_domain: String,
    pub average: String,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub spec_index: usize,
    pub seed: u64,
    pub report: Result<RunReport>,
}

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub rows: Vec<SummaryRow>,
    pub outcomes: Vec<RunOutcome>,
}

impl SuiteResult {
    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| r.status != "ok").count()
    }
}

fn source_key(engine: &EngineConfig, scenario: &ScenarioConfig) -> String {
    format!(
        "{}|{:?}|{}|{}",
        serde_json::to_string(scenario).unwrap_or_default(),
        engine.hidden,
        engine.feature_dim,
        serde_json::to_string(&(engine.reduced_dim, &engine.pretrain)).unwrap_or_default()
    )
}

fn summary_row(spec: &RunSpec, seed: u64, report: &Result<RunReport>) -> SummaryRow {
    let mut row = SummaryRow {
        name: spec.name.clone(),
        variant: spec.variant.clone(),
        scenario: spec.scenario_name.clone(),
        seed,
        status: "ok".into(),
        metric: crate::metrics::MetricKind::for_scenario(spec.scenario.kind)
            .name()
            .into(),
        n_domains: 0,
        per_domain: String::new(),
        average: String::new(),
    };
    match report {
        Ok(r) => {
            row.n_domains = r.per_domain.len();
            row.per_domain = r
                .per_domain
                .iter()
                .map(|d| d.value.to_string())
                .collect::<Vec<_>>()
                .join(";");
            row.average = r.average.map(|a| a.to_string()).unwrap_or_default();
        }
        Err(e) => row.status = format!("error: {e}"),
    }
    row
}

/// Runs every (spec, seed) pair. Source models are pretrained once per
/// distinct (scenario, architecture, seed) and shared across variants.
pub fn execute(suite: &ExperimentSuite, jobs: usize) -> Result<SuiteResult> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::config("jobs", e.to_string()))?;

    let pairs: Vec<(usize, u64)> = (0..suite.runs.len())
        .flat_map(|i| suite.seeds.iter().map(move |&s| (i, s)))
        .collect();
    let seeded = |i: usize, seed: u64| {
        let mut sc = suite.runs[i].scenario.clone();
        sc.seed = seed;
        sc
    };

    let mut keys: Vec<(String, usize, u64)> = Vec::new();
    let mut seen = HashSet::new();
    for &(i, seed) in &pairs {
        let key = source_key(&suite.runs[i].engine, &seeded(i, seed));
        if seen.insert(key.clone()) {
            keys.push((key, i, seed));
        }
    }
    let sources: HashMap<String, Result<(ParamSet, f64)>> = pool.install(|| {
        keys.par_iter()
            .map(|(key, i, seed)| {
                (
                    key.clone(),
                    source_model(&suite.runs[*i].engine, &seeded(*i, *seed)),
                )
            })
            .collect()
    });

    let outcomes: Vec<RunOutcome> = pool.install(|| {
        pairs
            .par_iter()
            .map(|&(i, seed)| {
                let spec = &suite.runs[i];
                let sc = seeded(i, seed);
                let report = match &sources[&source_key(&spec.engine, &sc)] {
                    Ok((src, acc)) => run_with_source(&spec.engine, &sc, src.clone(), *acc),
                    Err(e) => Err(e.clone()),
                };
                RunOutcome {
                    spec_index: i,
                    seed,
                    report,
                }
            })
            .collect()
    });
    let rows = outcomes
        .iter()
        .map(|o| summary_row(&suite.runs[o.spec_index], o.seed, &o.report))
        .collect();
    Ok(SuiteResult { rows, outcomes })
}

pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Mean of each variant's averaged metric per scenario, over successful seeds.
pub fn comparison_table(suite: &ExperimentSuite, rows: &[SummaryRow]) -> String {
    let mut variants: Vec<&str> = Vec::new();
    let mut scenarios: Vec<&str> = Vec::new();
    for spec in &suite.runs {
        if !variants.contains(&spec.variant.as_str()) {
            variants.push(&spec.variant);
        }
        if !scenarios.contains(&spec.scenario_name.as_str()) {
            scenarios.push(&spec.scenario_name);
        }
    }
    let mut cells: BTreeMap<(&str, &str), Vec<f64>> = BTreeMap::new();
    for r in rows {
        if let Ok(v) = r.average.parse::<f64>() {
            cells
                .entry((r.variant.as_str(), r.scenario.as_str()))
                .or_default()
                .push(v);
        }
    }
    let mut out = String::from("| variant |");
    for s in &scenarios {
        let _ = write!(out, " {s} |");
    }
    out.push_str("\n|---|");
    out.push_str(&"---|".repeat(scenarios.len()));
    out.push('\n');
    for v in &variants {
        let _ = write!(out, "| {v} |");
        for s in &scenarios {
            match cells.get(&(*v, *s)) {
                Some(xs) if !xs.is_empty() => {
                    let m = xs.iter().sum::<f64>() / xs.len() as f64;
                    let _ = write!(out, " {:.2} |", 100.0 * m);
                }
                _ => out.push_str(" - |"),
            }
        }
        out.push('\n');
    }
    out
}

pub fn run_name_file(name: &str, seed: u64, ext: &str) -> String {
    format!("{name}.{seed}.{ext}")
}

/// Executes the suite and writes all result files into `out_dir`.
pub fn run_suite(suite: &ExperimentSuite, out_dir: &Path, jobs: usize) -> Result<SuiteResult> {
    fs::create_dir_all(out_dir)?;
    let result = execute(suite, jobs)?;
    for o in &result.outcomes {
        let name = &suite.runs[o.spec_index].name;
        if let Ok(report) = &o.report {
            fs::write(
                out_dir.join(run_name_file(name, o.seed, "report.json")),
                report.to_json()?,
            )?;
            let mut f = fs::File::create(out_dir.join(run_name_file(name, o.seed, "steps.jsonl")))?;
            for step in &report.steps {
                writeln!(f, "{}", serde_json::to_string(step)?)?;
            }
        }
    }
    write_summary_csv(&out_dir.join("summary.csv"), &result.rows)?;
    fs::write(
        out_dir.join("comparison.md"),
        comparison_table(suite, &result.rows),
    )?;
    Ok(result)
}

/// Writes the generated source set and target stream of every scenario and
/// seed as CSV (`split, domain_id, label, x0..`).
pub fn dump_datasets(suite: &ExperimentSuite, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let mut done = HashSet::new();
    let mut written = Vec::new();
    for spec in &suite.runs {
        if !done.insert(spec.scenario_name.clone()) {
            continue;
        }
        for &seed in &suite.seeds {
            let mut sc = spec.scenario.clone();
            sc.seed = seed;
            let (src, stream) = make_scenario(&sc)?;
            let path = out_dir.join(format!("{}.{seed}.data.csv", spec.scenario_name));
            let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Io(e.to_string()))?;
            let mut header = vec!["split".to_string(), "domain_id".into(), "label".into()];
            header.extend((0..sc.input_dim).map(|j| format!("x{j}")));
            w.write_record(&header)
                .map_err(|e| Error::Io(e.to_string()))?;
            let mut emit = |split: &str, domain: String, label: usize, xs: Vec<f64>| {
                let mut rec = vec![split.to_string(), domain, label.to_string()];
                rec.extend(xs.iter().map(|x| x.to_string()));
                w.write_record(&rec).map_err(|e| Error::Io(e.to_string()))
            };
            for (i, &l) in src.labels.iter().enumerate() {
                emit(
                    "source",
                    String::new(),
                    l,
                    src.inputs.row(i).iter().copied().collect(),
                )?;
            }
            for b in stream {
                for (i, &l) in b.true_labels.iter().enumerate() {
                    emit(
                        "target",
                        b.domain_id.to_string(),
                        l,
                        b.inputs.row(i).iter().copied().collect(),
                    )?;
                }
            }
            w.flush()?;
            written.push(path);
        }
    }
    Ok(written)
}
