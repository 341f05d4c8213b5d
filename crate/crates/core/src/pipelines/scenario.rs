//! Scenario files: a TOML grid of experiment parameters, expanded into
//! runs whose results are written to `results.csv` and `summary.svg`.
//!
//! ```toml
//! name = "rho-sweep"
//! scheme = "kgw"
//! k = [2]
//! rho = [0.0, 0.1, 1.0]
//! seeds = [1, 2]
//! repetitions = 2
//! modes = ["open", "closed"]
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use super::lab::{prompts, run_key, stream_seed, Lab, LabConfig};
use super::svg::{log_p_chart, Point, Series};
use super::{detect_closed, detect_open, DetectOptions, DetectionReport, PipelineError, Supervision, Suspect};
use crate::dedup::{build_filter, AccessMode, FilterSource, FilterSet};
use crate::exec::ExecMode;
use crate::hashing::SecretKey;
use crate::models::{mix_dataset, Document, MixSpec, NGramModel, SamplingConfig};
use crate::schemes::{Scheme, WatermarkConfig};

#[derive(Debug, Error, PartialEq)]
#[error("{}{message}", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
pub struct ScenarioError {
    pub line: Option<usize>,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterChoice {
    None,
    Supervised,
    Unsupervised,
}

impl FilterChoice {
    fn as_str(self) -> &'static str {
        match self {
            FilterChoice::None => "none",
            FilterChoice::Supervised => "supervised",
            FilterChoice::Unsupervised => "unsupervised",
        }
    }
}

fn default_name() -> String {
    "scenario".into()
}
fn default_scheme() -> String {
    "kgw".into()
}
fn default_k() -> Vec<usize> {
    vec![2]
}
fn default_gamma() -> f64 {
    0.25
}
fn default_delta() -> f64 {
    3.0
}
fn default_one() -> f64 {
    1.0
}
fn default_temperature() -> f64 {
    0.8
}
fn default_nucleus() -> f64 {
    0.95
}
fn default_rho() -> Vec<f64> {
    vec![1.0]
}
fn default_orders() -> Vec<usize> {
    vec![3]
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_reps() -> u64 {
    1
}
fn default_modes() -> Vec<AccessMode> {
    vec![AccessMode::Open]
}
fn default_supervision() -> Supervision {
    Supervision::Unsupervised
}
fn default_filter() -> FilterChoice {
    FilterChoice::None
}
fn default_true() -> bool {
    true
}
fn default_vocab() -> usize {
    256
}
fn default_train_docs() -> usize {
    1000
}
fn default_doc_len() -> usize {
    256
}
fn default_detect_docs() -> usize {
    100
}
fn default_prompt_len() -> usize {
    64
}
fn default_completion_len() -> usize {
    192
}
fn default_lambda() -> f64 {
    0.01
}
fn default_copy_prob() -> f64 {
    0.6
}
fn default_copy_len() -> usize {
    2
}
fn default_teacher_docs() -> usize {
    2000
}

/// A parsed and validated scenario.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default = "default_name")]
    pub name: String,
    /// `kgw` or `ak`.
    #[serde(default = "default_scheme")]
    pub scheme: String,
    #[serde(default = "default_k")]
    pub k: Vec<usize>,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    /// Logit temperature of the `ak` scheme.
    #[serde(default = "default_one")]
    pub ak_temperature: f64,
    /// Sampling temperature of the teacher and the suspect.
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_nucleus")]
    pub nucleus_p: f64,
    #[serde(default = "default_rho")]
    pub rho: Vec<f64>,
    #[serde(default = "default_rho")]
    pub d: Vec<f64>,
    /// Student n-gram orders.
    #[serde(default = "default_orders")]
    pub orders: Vec<usize>,
    /// Caps on scored tuples; empty means unlimited.
    #[serde(default)]
    pub budgets: Vec<u64>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_reps")]
    pub repetitions: u64,
    #[serde(default = "default_modes")]
    pub modes: Vec<AccessMode>,
    #[serde(default = "default_supervision")]
    pub supervision: Supervision,
    /// Closed mode only.
    #[serde(default = "default_filter")]
    pub filter: FilterChoice,
    /// Also score the student after continued training on clean text.
    #[serde(default)]
    pub purify: bool,
    #[serde(default = "default_true")]
    pub dedup: bool,
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    #[serde(default = "default_train_docs")]
    pub train_docs: usize,
    #[serde(default = "default_doc_len")]
    pub doc_len: usize,
    #[serde(default = "default_detect_docs")]
    pub detect_docs: usize,
    #[serde(default = "default_prompt_len")]
    pub prompt_len: usize,
    #[serde(default = "default_completion_len")]
    pub completion_len: usize,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_copy_prob")]
    pub copy_prob: f64,
    #[serde(default = "default_copy_len")]
    pub copy_len: usize,
    #[serde(default = "default_one")]
    pub source_exponent: f64,
    #[serde(default)]
    pub source_seed: u64,
    #[serde(default = "default_teacher_docs")]
    pub teacher_docs: usize,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn key_line(text: &str, key: &str) -> Option<usize> {
    text.lines().position(|l| {
        let l = l.trim_start();
        l.strip_prefix(key)
            .is_some_and(|rest| rest.trim_start().starts_with('='))
    })
    .map(|i| i + 1)
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = toml::from_str(text).map_err(|e| ScenarioError {
            line: e.span().map(|r| line_of(text, r.start)),
            message: e.message().trim().to_string(),
        })?;
        s.validate().map_err(|(key, message)| ScenarioError {
            line: key_line(text, key),
            message: format!("`{key}`: {message}"),
        })?;
        Ok(s)
    }

    fn validate(&self) -> Result<(), (&'static str, String)> {
        let fail = |key, m: &str| Err((key, m.to_string()));
        if self.name.is_empty()
            || !self.name.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
        {
            return fail("name", "use letters, digits, `-`, `_` or `.`");
        }
        match self.scheme.parse::<Scheme>() {
            Ok(Scheme::Kgw | Scheme::Aaronson) => {}
            _ => return fail("scheme", "expected `kgw` or `ak`"),
        }
        let lists: [(&'static str, bool); 8] = [
            ("k", self.k.is_empty()),
            ("rho", self.rho.is_empty()),
            ("d", self.d.is_empty()),
            ("orders", self.orders.is_empty()),
            ("seeds", self.seeds.is_empty()),
            ("modes", self.modes.is_empty()),
            ("repetitions", self.repetitions == 0),
            ("budgets", self.budgets.contains(&0)),
        ];
        for (key, bad) in lists {
            if bad {
                return fail(key, "must be non-empty and positive");
            }
        }
        if self.k.contains(&0) {
            return fail("k", "window size must be at least 1");
        }
        if self.rho.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return fail("rho", "values must lie in [0, 1]");
        }
        if self.d.iter().any(|d| !(*d > 0.0 && *d <= 1.0)) {
            return fail("d", "values must lie in (0, 1]");
        }
        if self.orders.contains(&0) {
            return fail("orders", "orders must be at least 1");
        }
        if self.prompt_len == 0 || self.prompt_len >= self.doc_len {
            return fail("prompt_len", "must lie in [1, doc_len)");
        }
        if self.completion_len == 0 {
            return fail("completion_len", "must be at least 1");
        }
        if self.train_docs == 0 || self.detect_docs == 0 || self.teacher_docs == 0 {
            return fail("train_docs", "document counts must be positive");
        }
        if self.filter != FilterChoice::None && !self.modes.contains(&AccessMode::Closed) {
            return fail("filter", "filters only apply to closed mode");
        }
        // remaining parameter checks are delegated to the components
        self.lab_config(ExecMode::Sequential)
            .sampling
            .validate()
            .or_else(|e| fail("temperature", &e.to_string()))?;
        for &k in &self.k {
            if let Err(e) = self.watermark(SecretKey::new(1).expect("valid key"), k) {
                return fail("gamma", &e.to_string());
            }
        }
        Ok(())
    }

    fn lab_config(&self, exec: ExecMode) -> LabConfig {
        LabConfig {
            vocab_size: self.vocab_size,
            source_exponent: self.source_exponent,
            source_seed: self.source_seed,
            teacher_docs: self.teacher_docs,
            doc_len: self.doc_len,
            sampling: SamplingConfig {
                temperature: self.temperature,
                nucleus_p: self.nucleus_p,
                max_tokens: self.completion_len,
                seed: 0,
            },
            student_lambda: self.lambda,
            copy_prob: self.copy_prob,
            copy_len: self.copy_len,
            exec,
            ..LabConfig::default()
        }
    }

    fn watermark(&self, key: SecretKey, k: usize) -> Result<WatermarkConfig, PipelineError> {
        Ok(match self.scheme.parse::<Scheme>()? {
            Scheme::Aaronson => WatermarkConfig::aaronson(key, k, self.vocab_size, self.ak_temperature)?,
            _ => WatermarkConfig::kgw(key, k, self.vocab_size, self.gamma, self.delta)?,
        })
    }

    /// Name of the first parameter with more than one value.
    pub fn swept(&self) -> Option<&'static str> {
        [
            ("rho", self.rho.len()),
            ("d", self.d.len()),
            ("k", self.k.len()),
            ("order", self.orders.len()),
            ("budget", self.budgets.len()),
        ]
        .into_iter()
        .find(|&(_, n)| n > 1)
        .map(|(name, _)| name)
    }
}

/// One detection run.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub run: usize,
    pub seed: u64,
    pub rep: u64,
    pub mode: AccessMode,
    pub filter: FilterChoice,
    pub rho: f64,
    pub d: f64,
    pub k: usize,
    pub order: usize,
    pub budget: Option<u64>,
    pub purified: bool,
    pub report: DetectionReport,
}

impl ResultRow {
    fn swept_value(&self, name: Option<&str>) -> f64 {
        match name {
            Some("rho") => self.rho,
            Some("d") => self.d,
            Some("k") => self.k as f64,
            Some("order") => self.order as f64,
            Some("budget") => self.budget.map_or(0.0, |b| b as f64),
            _ => 0.0,
        }
    }
}

pub const CSV_HEADER: &str = "scenario,run,seed,rep,key_fingerprint,scheme,mode,supervision,filter,rho,d,k,order,budget,purified,n_scored,score,p_value,log10_p,inconclusive";

fn mode_str(m: AccessMode) -> &'static str {
    match m {
        AccessMode::Open => "open",
        AccessMode::Closed => "closed",
    }
}

/// Renders rows as CSV with a header line.
pub fn results_csv(name: &str, rows: &[ResultRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        let p = &r.report;
        let _ = writeln!(
            s,
            "{name},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.run,
            r.seed,
            r.rep,
            p.key_fingerprint,
            p.scheme,
            mode_str(r.mode),
            match p.supervision {
                Supervision::Supervised => "supervised",
                Supervision::Unsupervised => "unsupervised",
            },
            r.filter.as_str(),
            r.rho,
            r.d,
            r.k,
            r.order,
            r.budget.map(|b| b.to_string()).unwrap_or_default(),
            r.purified,
            p.n_scored,
            p.score,
            p.p_value,
            p.log10_p,
            p.inconclusive
        );
    }
    s
}

/// Mean and sample standard deviation of `log10 p` against the swept
/// parameter, one series per mode and purification state.
pub fn summary_series(scenario: &Scenario, rows: &[ResultRow]) -> Vec<Series> {
    let swept = scenario.swept();
    let mut series: Vec<(String, Vec<(f64, Vec<f64>)>)> = Vec::new();
    for r in rows {
        let mut label = mode_str(r.mode).to_string();
        if r.filter != FilterChoice::None {
            label += &format!(" filter={}", r.filter.as_str());
        }
        if r.purified {
            label += " purified";
        }
        let idx = match series.iter().position(|(l, _)| *l == label) {
            Some(i) => i,
            None => {
                series.push((label, Vec::new()));
                series.len() - 1
            }
        };
        let x = r.swept_value(swept);
        let pts = &mut series[idx].1;
        match pts.iter_mut().find(|(px, _)| *px == x) {
            Some((_, ys)) => ys.push(r.report.log10_p),
            None => pts.push((x, vec![r.report.log10_p])),
        }
    }
    series
        .into_iter()
        .map(|(label, mut pts)| {
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            Series {
                label,
                points: pts
                    .into_iter()
                    .map(|(x, ys)| {
                        let n = ys.len() as f64;
                        let mean = ys.iter().sum::<f64>() / n;
                        let var = if ys.len() > 1 {
                            ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1.0)
                        } else {
                            0.0
                        };
                        Point { x, mean, sd: var.sqrt() }
                    })
                    .collect(),
            }
        })
        .collect()
}

struct RunCorpora {
    training: Vec<Document>,
    supervised: Vec<Document>,
    fresh: Vec<Document>,
    purify: Vec<Document>,
}

fn corpora(
    sc: &Scenario,
    lab: &Lab,
    cfg: &WatermarkConfig,
    seed: u64,
    rep: u64,
    rho: f64,
    d: f64,
) -> Result<RunCorpora, PipelineError> {
    let tag = |name: &str| stream_seed(seed, rep, &format!("{name}/k{}/rho{rho}/d{d}", cfg.k));
    let n_wm = (rho * sc.train_docs as f64).round() as usize;
    let known = (n_wm as f64 / d).round() as usize;
    let wm_pool = lab.corpus(known, tag("wm"), Some(cfg))?;
    let clean = lab.corpus(sc.train_docs - n_wm, tag("clean"), None)?;
    let mix = mix_dataset(&wm_pool, &clean, MixSpec { rho, d }, sc.train_docs)?;
    let fresh = lab.corpus(sc.detect_docs, tag("fresh"), Some(cfg))?;
    let purify = if sc.purify {
        lab.corpus(sc.train_docs, tag("purify"), None)?
    } else {
        Vec::new()
    };
    Ok(RunCorpora {
        training: mix.training,
        supervised: mix.supervised,
        fresh,
        purify,
    })
}

struct Job<'a> {
    sc: &'a Scenario,
    lab: &'a Lab,
    cfg: &'a WatermarkConfig,
    corpora: &'a RunCorpora,
    phi: Option<&'a FilterSet>,
    sampling: SamplingConfig,
}

impl Job<'_> {
    fn texts(&self) -> &[Document] {
        let c = self.corpora;
        let src = match self.sc.supervision {
            Supervision::Supervised if !c.supervised.is_empty() => &c.supervised,
            _ => &c.fresh,
        };
        &src[..src.len().min(self.sc.detect_docs)]
    }

    fn detect(
        &self,
        student: &NGramModel,
        mode: AccessMode,
        budget: Option<u64>,
    ) -> Result<DetectionReport, PipelineError> {
        let mut opts = DetectOptions::new(self.sc.supervision);
        opts.dedup = self.sc.dedup;
        opts.budget = budget;
        opts.exec = self.lab.config().exec;
        match mode {
            AccessMode::Open => detect_open(Suspect::Local(student), self.texts(), self.cfg, &opts),
            AccessMode::Closed => {
                let suspect = self.lab.suspect(student.clone());
                let prompts = prompts(self.texts(), self.sc.prompt_len);
                detect_closed(
                    Suspect::Local(&suspect),
                    &prompts,
                    self.cfg,
                    self.phi,
                    &self.sampling,
                    &opts,
                )
            }
        }
    }
}

/// Expands the grid and runs every detection, in a fixed order.
pub fn run_rows(sc: &Scenario, exec: ExecMode) -> Result<Vec<ResultRow>, PipelineError> {
    let lab = Lab::new(sc.lab_config(exec))?;
    let budgets: Vec<Option<u64>> = if sc.budgets.is_empty() {
        vec![None]
    } else {
        sc.budgets.iter().map(|&b| Some(b)).collect()
    };
    let mut rows = Vec::new();
    for &seed in &sc.seeds {
        for rep in 0..sc.repetitions {
            let key = run_key(seed, rep);
            for &k in &sc.k {
                let cfg = sc.watermark(key, k)?;
                for &rho in &sc.rho {
                    for &d in &sc.d {
                        log::info!(
                            "{}: seed {seed} rep {rep} k {k} rho {rho} d {d} key {}",
                            sc.name,
                            key.fingerprint()
                        );
                        let corpora = corpora(sc, &lab, &cfg, seed, rep, rho, d)?;
                        let phi = match sc.filter {
                            FilterChoice::None => None,
                            FilterChoice::Supervised => Some(build_filter(
                                corpora.supervised.iter().map(|d| d.tokens.as_slice()),
                                k,
                                FilterSource::Supervised,
                            )),
                            FilterChoice::Unsupervised => {
                                let fresh = lab.corpus(
                                    sc.train_docs,
                                    stream_seed(seed, rep, &format!("filter/k{k}")),
                                    Some(&cfg),
                                )?;
                                Some(build_filter(
                                    fresh.iter().map(|d| d.tokens.as_slice()),
                                    k,
                                    FilterSource::Fresh,
                                ))
                            }
                        };
                        let mut sampling = lab.config().sampling;
                        sampling.seed = stream_seed(seed, rep, "complete");
                        let job = Job {
                            sc,
                            lab: &lab,
                            cfg: &cfg,
                            corpora: &corpora,
                            phi: phi.as_ref(),
                            sampling,
                        };
                        for &order in &sc.orders {
                            let mut student = lab.train_student(&corpora.training, order)?;
                            let passes: &[bool] = if sc.purify { &[false, true] } else { &[false] };
                            for &purified in passes {
                                if purified {
                                    student.train_more(&corpora.purify)?;
                                }
                                for &budget in &budgets {
                                    for &mode in &sc.modes {
                                        let report = job.detect(&student, mode, budget)?;
                                        rows.push(ResultRow {
                                            run: rows.len(),
                                            seed,
                                            rep,
                                            mode,
                                            filter: if mode == AccessMode::Closed {
                                                sc.filter
                                            } else {
                                                FilterChoice::None
                                            },
                                            rho,
                                            d,
                                            k,
                                            order,
                                            budget,
                                            purified,
                                            report,
                                        });
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(rows)
}

/// Files written by [`run_scenario`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioOutput {
    pub results_csv: PathBuf,
    pub summary_svg: PathBuf,
    pub rows: Vec<ResultRow>,
}

/// Runs the scenario in `spec` and writes `results.csv` and `summary.svg`
/// into `out_dir`.
pub fn run_scenario(spec: &Path, out_dir: &Path, exec: ExecMode) -> Result<ScenarioOutput, PipelineError> {
    let text = std::fs::read_to_string(spec)?;
    let sc = Scenario::parse(&text)?;
    let rows = run_rows(&sc, exec)?;
    std::fs::create_dir_all(out_dir)?;
    let csv_path = out_dir.join("results.csv");
    std::fs::write(&csv_path, results_csv(&sc.name, &rows))?;
    let summary_svg = out_dir.join("summary.svg");
    let title = format!("{}: log10 p by {}", sc.name, sc.swept().unwrap_or("run"));
    std::fs::write(
        &summary_svg,
        log_p_chart(&title, sc.swept().unwrap_or("run"), &summary_series(&sc, &rows)),
    )?;
    Ok(ScenarioOutput {
        results_csv: csv_path,
        summary_svg,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const TINY: &str = r#"
name = "tiny"
k = [2]
rho = [0.0, 1.0]
orders = [3]
seeds = [7]
modes = ["open", "closed"]
vocab_size = 32
train_docs = 20
teacher_docs = 20
doc_len = 40
detect_docs = 4
prompt_len = 8
completion_len = 16
purify = true
"#;

    #[test]
    fn defaults_and_sweep() {
        let s = Scenario::parse("").unwrap();
        assert_eq!((s.k.clone(), s.gamma, s.delta), (vec![2], 0.25, 3.0));
        assert_eq!(s.swept(), None);
        assert_eq!(Scenario::parse(TINY).unwrap().swept(), Some("rho"));
    }

    #[test]
    fn errors_carry_lines() {
        let e = Scenario::parse("name = \"a\"\n\nbogus = 1\n").unwrap_err();
        assert_eq!(e.line, Some(3));
        let e = Scenario::parse("name = \"a\"\nrho = [0.5, 2.0]\n").unwrap_err();
        assert_eq!(e.line, Some(2));
        assert!(e.to_string().starts_with("line 2: `rho`"));
        let e = Scenario::parse("k = \"two\"\n").unwrap_err();
        assert_eq!(e.line, Some(1));
        let e = Scenario::parse("scheme = \"mpac\"\n").unwrap_err();
        assert_eq!(e.line, Some(1));
        let e = Scenario::parse("gamma = 1.5\n").unwrap_err();
        assert_eq!(e.line, Some(1));
        let e = Scenario::parse("filter = \"supervised\"\n").unwrap_err();
        assert!(e.message.contains("closed"));
    }

    #[test]
    fn tiny_scenario_is_deterministic() {
        let sc = Scenario::parse(TINY).unwrap();
        let a = run_rows(&sc, ExecMode::Sequential).unwrap();
        let b = run_rows(&sc, ExecMode::available()).unwrap();
        // 2 rho values x 2 purification states x 2 modes
        assert_eq!(a.len(), 8);
        assert_eq!(results_csv("tiny", &a), results_csv("tiny", &b));
        let csv = results_csv("tiny", &a);
        assert_eq!(csv.lines().count(), 9);
        assert!(csv.lines().skip(1).all(|l| l.split(',').count() == 20));
        let series = summary_series(&sc, &a);
        assert_eq!(series.len(), 4);
        assert!(series.iter().all(|s| s.points.len() == 2));
    }

    #[test]
    fn run_scenario_writes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let spec = dir.path().join("s.toml");
        std::fs::write(&spec, TINY.replace("purify = true", "")).unwrap();
        let out = run_scenario(&spec, &dir.path().join("out"), ExecMode::available()).unwrap();
        assert_eq!(out.rows.len(), 4);
        let svg = std::fs::read_to_string(out.summary_svg).unwrap();
        assert!(svg.contains("<svg"));
        let csv = std::fs::read_to_string(out.results_csv).unwrap();
        assert!(csv.starts_with(CSV_HEADER));
        assert!(!csv.contains(&run_key(7, 0).value().to_string()));
    }
}
