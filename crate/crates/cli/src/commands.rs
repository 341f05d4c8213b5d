use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;

use radioscope::dedup::{build_filter, AccessMode, FilterSet, FilterSource};
use radioscope::exec::ExecMode;
use radioscope::hashing::SecretKey;
use radioscope::models::remote::{RemoteClient, RemoteConfig};
use radioscope::models::{
    read_jsonl, save_jsonl, CopyingModel, Document, LanguageModel, NGramModel, SamplingConfig,
};
use radioscope::pipelines::lab::{prompts, Lab, LabConfig};
use radioscope::pipelines::scenario::run_scenario;
use radioscope::pipelines::{
    combine_distributions, detect_closed, detect_open, mia_detect, DetectOptions, DetectionReport,
    PipelineError, Supervision, Suspect,
};
use radioscope::schemes::WatermarkConfig;

use crate::manifest::Manifest;
use crate::settings::{pick, ConfigFile};
use crate::{
    Cli, Command, DetectArgs, FilterArgs, FilterSourceArg, GenerateArgs, MiaArgs, ModeArg,
    Outcome, SamplingArgs, ScenarioArgs, SchemeArg, SupervisionArg, TeacherArgs, TrainArgs,
    WatermarkArgs,
};

const NO_DEDUP_BANNER: &str = "WARNING: de-duplication is disabled. Scored tuples are not \
independent and the reported p-values are NOT valid; use this only to demonstrate why the \
de-duplication rules are needed.";

struct Ctx {
    config: ConfigFile,
    config_bytes: Option<Vec<u8>>,
    exec: ExecMode,
}

pub fn run(cli: Cli) -> Result<Outcome> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let (config, config_bytes) = match &cli.config {
        Some(p) => {
            let (c, b) = ConfigFile::load(p)?;
            (c, Some(b))
        }
        None => (ConfigFile::default(), None),
    };
    let ctx = Ctx {
        config,
        config_bytes,
        exec: ExecMode::available(),
    };
    match cli.command {
        Command::Generate(a) => generate(&ctx, a),
        Command::Train(a) => train(&ctx, a),
        Command::BuildFilter(a) => filter(&ctx, a),
        Command::Detect(a) => detect(&ctx, a),
        Command::Mia(a) => mia(&ctx, a),
        Command::Scenario(a) => scenario(&ctx, a),
    }
}

fn manifest(ctx: &Ctx, settings: &impl Serialize) -> Result<Manifest> {
    Manifest::start(settings, ctx.config_bytes.as_deref())
}

fn out_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

#[derive(Debug, Clone, Serialize)]
struct WatermarkSettings {
    scheme: &'static str,
    k: usize,
    gamma: Option<f64>,
    delta: Option<f64>,
    ak_temperature: Option<f64>,
    message_bits: Option<usize>,
    vocab_size: usize,
    key_fingerprint: Option<String>,
}

fn parse_bits(s: &str) -> Result<Vec<bool>> {
    s.chars()
        .map(|c| match c {
            '0' => Ok(false),
            '1' => Ok(true),
            _ => Err(anyhow!("--message takes a string of 0s and 1s")),
        })
        .collect()
}

fn watermark(
    ctx: &Ctx,
    a: &WatermarkArgs,
    vocab_size: usize,
) -> Result<(WatermarkConfig, WatermarkSettings)> {
    let c = &ctx.config;
    let scheme = match (a.scheme, c.scheme.as_deref()) {
        (Some(s), _) => s,
        (None, Some(s)) => SchemeArg::from_str_config(s)?,
        (None, None) => SchemeArg::Kgw,
    };
    let k = pick(a.k, c.k, 2);
    let delta = a.delta.or(c.delta);
    if scheme == SchemeArg::Ak && delta.is_some() {
        bail!("--delta does not apply to the ak scheme; use --ak-temperature");
    }
    let mut s = WatermarkSettings {
        scheme: match scheme {
            SchemeArg::Kgw => "kgw",
            SchemeArg::Ak => "ak",
            SchemeArg::Mpac => "mpac",
        },
        k,
        gamma: None,
        delta: None,
        ak_temperature: None,
        message_bits: None,
        vocab_size,
        key_fingerprint: None,
    };
    let key = match a.key {
        Some(v) => SecretKey::new(v).map_err(|e| anyhow!("invalid key: {e}"))?,
        None => bail!("a secret key is required: pass --key or set RADIOSCOPE_KEY"),
    };
    s.key_fingerprint = Some(key.fingerprint());
    let cfg = match scheme {
        SchemeArg::Kgw => {
            let gamma = pick(a.gamma, c.gamma, 0.25);
            let delta = delta.unwrap_or(3.0);
            s.gamma = Some(gamma);
            s.delta = Some(delta);
            WatermarkConfig::kgw(key, k, vocab_size, gamma, delta)?
        }
        SchemeArg::Ak => {
            let t = pick(a.ak_temperature, c.ak_temperature, 1.0);
            s.ak_temperature = Some(t);
            WatermarkConfig::aaronson(key, k, vocab_size, t)?
        }
        SchemeArg::Mpac => {
            let bits = a
                .message
                .as_deref()
                .or(c.message.as_deref())
                .ok_or_else(|| anyhow!("the mpac scheme needs --message"))?;
            let bits = parse_bits(bits)?;
            let delta = delta.unwrap_or(3.0);
            s.delta = Some(delta);
            s.message_bits = Some(bits.len());
            WatermarkConfig::mpac(key, k, vocab_size, delta, bits)?
        }
    };
    Ok((cfg, s))
}

impl SchemeArg {
    fn from_str_config(s: &str) -> Result<Self> {
        <SchemeArg as clap::ValueEnum>::from_str(s, true)
            .map_err(|_| anyhow!("config: unknown scheme `{s}`"))
    }
}

fn sampling(ctx: &Ctx, a: &SamplingArgs, max_tokens: usize) -> SamplingConfig {
    let c = &ctx.config;
    SamplingConfig {
        temperature: pick(a.temp, c.temp, 0.8),
        nucleus_p: pick(a.nucleus_p, c.nucleus_p, 0.95),
        max_tokens,
        seed: pick(a.seed, c.seed, 0),
    }
}

#[derive(Debug, Serialize)]
struct GenerateSettings {
    watermark: Option<WatermarkSettings>,
    vocab_size: usize,
    source_seed: u64,
    source_exponent: f64,
    teacher_docs: usize,
    docs: usize,
    doc_len: usize,
    sampling: SamplingConfig,
}

fn lab_config(ctx: &Ctx, t: &TeacherArgs, doc_len: usize, sampling: SamplingConfig) -> LabConfig {
    let c = &ctx.config;
    LabConfig {
        vocab_size: pick(t.vocab_size, c.vocab_size, 256),
        source_seed: pick(t.source_seed, c.source_seed, 0),
        source_exponent: pick(t.source_exponent, c.source_exponent, 1.0),
        teacher_docs: pick(t.teacher_docs, c.teacher_docs, 2000),
        doc_len,
        sampling,
        exec: ctx.exec,
        ..LabConfig::default()
    }
}

fn generate(ctx: &Ctx, a: GenerateArgs) -> Result<Outcome> {
    let c = &ctx.config;
    let docs = pick(a.docs, c.docs, 1000);
    let doc_len = pick(a.doc_len, c.doc_len, 256);
    let sampling = sampling(ctx, &a.sampling, doc_len);
    let lab_cfg = lab_config(ctx, &a.teacher, doc_len, sampling);
    let (wm, wm_settings) = if a.no_watermark {
        (None, None)
    } else {
        let (cfg, s) = watermark(ctx, &a.wm, lab_cfg.vocab_size)?;
        (Some(cfg), Some(s))
    };
    let settings = GenerateSettings {
        watermark: wm_settings,
        vocab_size: lab_cfg.vocab_size,
        source_seed: lab_cfg.source_seed,
        source_exponent: lab_cfg.source_exponent,
        teacher_docs: lab_cfg.teacher_docs,
        docs,
        doc_len,
        sampling,
    };
    let mut m = manifest(ctx, &settings)?;
    let lab = Lab::new(lab_cfg)?;
    let corpus = lab.corpus(docs, sampling.seed, wm.as_ref())?;
    out_dir(&a.out_dir)?;
    let path = a.out_dir.join("corpus.jsonl");
    save_jsonl(&path, &corpus)?;
    if let Some(cfg) = &wm {
        m.key(cfg.key.fingerprint());
    }
    m.output(&path)?;
    m.write(&a.out_dir)?;
    println!("{} documents written to {}", corpus.len(), path.display());
    Ok(Outcome::Ok)
}

#[derive(Debug, Serialize)]
struct TrainSettings {
    order: usize,
    lambda: f64,
    vocab_size: usize,
    k: usize,
    resumed: bool,
}

fn read_corpora(paths: &[PathBuf], m: &mut Manifest) -> Result<Vec<Document>> {
    let mut all = Vec::new();
    for p in paths {
        all.extend(read_jsonl(p)?);
        m.input(p)?;
    }
    Ok(all)
}

fn train(ctx: &Ctx, a: TrainArgs) -> Result<Outcome> {
    let c = &ctx.config;
    let k = pick(a.k, c.k, 2);
    let mut model = match &a.resume {
        Some(p) => NGramModel::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => NGramModel::empty(
            pick(a.order, c.order, 3),
            pick(a.lambda, c.lambda, 0.01),
            pick(a.vocab_size, c.vocab_size, 256),
        )?,
    };
    if a.resume.is_some() && (a.order.is_some() || a.lambda.is_some() || a.vocab_size.is_some()) {
        bail!("--order, --lambda and --vocab-size come from the model when resuming");
    }
    let settings = TrainSettings {
        order: model.order(),
        lambda: model.lambda(),
        vocab_size: model.vocab_size(),
        k,
        resumed: a.resume.is_some(),
    };
    if model.order() < k + 1 {
        log::warn!(
            "student order {} < k + 1 = {}: the student cannot memorise full watermark windows",
            model.order(),
            k + 1
        );
    }
    let mut m = manifest(ctx, &settings)?;
    if let Some(p) = &a.resume {
        m.input(p)?;
    }
    let corpus = read_corpora(&a.corpus, &mut m)?;
    model.train_more(&corpus)?;
    out_dir(&a.out_dir)?;
    let path = a.out_dir.join("model.rsm");
    model.save(&path)?;
    m.output(&path)?;
    m.write(&a.out_dir)?;
    println!(
        "order-{} model with {} records written to {}",
        model.order(),
        model.num_records(),
        path.display()
    );
    Ok(Outcome::Ok)
}

#[derive(Debug, Serialize)]
struct FilterSettings {
    k: usize,
    source: &'static str,
}

fn filter(ctx: &Ctx, a: FilterArgs) -> Result<Outcome> {
    let k = pick(a.k, ctx.config.k, 2);
    if k == 0 {
        bail!("--k must be at least 1");
    }
    let (source, name) = match a.source {
        FilterSourceArg::Supervised => (FilterSource::Supervised, "supervised"),
        FilterSourceArg::Fresh => (FilterSource::Fresh, "fresh"),
    };
    let mut m = manifest(ctx, &FilterSettings { k, source: name })?;
    let corpus = read_corpora(&a.corpus, &mut m)?;
    let phi = build_filter(corpus.iter().map(|d| d.tokens.as_slice()), k, source);
    out_dir(&a.out_dir)?;
    let path = a.out_dir.join("filter.rsf");
    phi.save(&path)?;
    m.output(&path)?;
    m.write(&a.out_dir)?;
    println!("{} distinct {k}-grams written to {}", phi.len(), path.display());
    Ok(Outcome::Ok)
}

#[derive(Debug, Serialize)]
struct DetectSettings {
    mode: &'static str,
    suspect: String,
    watermark: WatermarkSettings,
    supervision: Supervision,
    budget: Option<u64>,
    repetitions: usize,
    dedup: bool,
    prompt_len: Option<usize>,
    sampling: Option<SamplingConfig>,
    copy_prob: Option<f64>,
    copy_len: Option<usize>,
    chunk_docs: usize,
}

#[derive(Debug, Serialize)]
struct DetectSummary {
    repetitions: usize,
    mean_p: f64,
    mean_log10_p: f64,
    sd_log10_p: f64,
    /// Fisher combination over the disjoint chunks.
    combined_log10_p: f64,
    inconclusive: usize,
    valid: bool,
}

#[derive(Debug, Serialize)]
struct DetectOutput<'a> {
    summary: &'a DetectSummary,
    runs: &'a [DetectionReport],
}

fn summarize(reports: &[DetectionReport], dedup: bool) -> Result<DetectSummary> {
    let n = reports.len() as f64;
    let l: Vec<f64> = reports.iter().map(|r| r.log10_p).collect();
    let mean = l.iter().sum::<f64>() / n;
    let sd = if reports.len() > 1 {
        (l.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(DetectSummary {
        repetitions: reports.len(),
        mean_p: reports.iter().map(|r| r.p_value).sum::<f64>() / n,
        mean_log10_p: mean,
        sd_log10_p: sd,
        combined_log10_p: combine_distributions(reports)?.log10_p,
        inconclusive: reports.iter().filter(|r| r.inconclusive).count(),
        valid: dedup,
    })
}

fn detect_csv(reports: &[DetectionReport]) -> String {
    let mut s = String::from("run,key_fingerprint,scheme,mode,n_documents,n_scored,score,p_value,log10_p,inconclusive\n");
    for (i, r) in reports.iter().enumerate() {
        s += &format!(
            "{i},{},{},{},{},{},{},{},{},{}\n",
            r.key_fingerprint,
            r.scheme,
            match r.mode {
                AccessMode::Open => "open",
                AccessMode::Closed => "closed",
            },
            r.n_documents,
            r.n_scored,
            r.score,
            r.p_value,
            r.log10_p,
            r.inconclusive
        );
    }
    s
}

/// Contiguous, near-equal, disjoint chunks.
fn chunks<T>(items: &[T], n: usize) -> Vec<&[T]> {
    let base = items.len() / n;
    let extra = items.len() % n;
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    for i in 0..n {
        let len = base + usize::from(i < extra);
        out.push(&items[start..start + len]);
        start += len;
    }
    out
}

enum LocalSuspect {
    Open(NGramModel),
    Closed(CopyingModel<NGramModel>),
}

impl LocalSuspect {
    fn model(&self) -> &dyn LanguageModel {
        match self {
            LocalSuspect::Open(m) => m,
            LocalSuspect::Closed(m) => m,
        }
    }
}

fn detect(ctx: &Ctx, a: DetectArgs) -> Result<Outcome> {
    let c = &ctx.config;
    let mode = match (a.mode, c.mode.as_deref()) {
        (Some(m), _) => m,
        (None, Some("open")) | (None, None) => ModeArg::Open,
        (None, Some("closed")) => ModeArg::Closed,
        (None, Some(other)) => bail!("config: unknown mode `{other}`"),
    };
    let supervision = match (a.supervision, c.supervision.as_deref()) {
        (Some(SupervisionArg::Supervised), _) | (None, Some("supervised")) => Supervision::Supervised,
        (Some(SupervisionArg::Unsupervised), _) | (None, Some("unsupervised")) | (None, None) => {
            Supervision::Unsupervised
        }
        (None, Some(other)) => bail!("config: unknown supervision `{other}`"),
    };
    if a.filter.is_some() && mode == ModeArg::Open {
        bail!("--filter applies to closed mode only");
    }
    let endpoint = a.endpoint.clone().or_else(|| c.endpoint.clone());
    let local = match &a.model {
        Some(p) => Some(NGramModel::load(p).with_context(|| format!("loading {}", p.display()))?),
        None => None,
    };
    let vocab_size = match (&local, a.vocab_size.or(c.vocab_size)) {
        (Some(m), Some(v)) if v != m.vocab_size() => {
            bail!("--vocab-size {v} differs from the model's {}", m.vocab_size())
        }
        (Some(m), _) => m.vocab_size(),
        (None, Some(v)) => v,
        (None, None) => bail!("--vocab-size is required with --endpoint"),
    };
    let (cfg, wm_settings) = watermark(ctx, &a.wm, vocab_size)?;
    if cfg.positions().is_some() {
        bail!("multi-bit watermarks are decoded, not tested; use the kgw or ak scheme");
    }
    let repetitions = pick(a.repetitions, c.repetitions, 1);
    if repetitions == 0 {
        bail!("--repetitions must be at least 1");
    }
    let closed = mode == ModeArg::Closed;
    let prompt_len = pick(a.prompt_len, c.prompt_len, 64);
    let sampling = sampling(ctx, &a.sampling, pick(a.max_tokens, c.max_tokens, 192));
    let copy_prob = pick(a.copy_prob, c.copy_prob, 0.6);
    let copy_len = pick(a.copy_len, c.copy_len, 2);
    let local_closed = closed && local.is_some();
    let settings = DetectSettings {
        mode: if closed { "closed" } else { "open" },
        suspect: match (&a.model, &endpoint) {
            (Some(p), _) => p.display().to_string(),
            (None, Some(e)) => e.clone(),
            (None, None) => unreachable!("clap requires one of them"),
        },
        watermark: wm_settings,
        supervision,
        budget: a.budget.or(c.budget),
        repetitions,
        dedup: !a.no_dedup,
        prompt_len: closed.then_some(prompt_len),
        sampling: closed.then_some(sampling),
        copy_prob: local_closed.then_some(copy_prob),
        copy_len: local_closed.then_some(copy_len),
        chunk_docs: pick(a.chunk_docs, c.chunk_docs, 100),
    };
    let mut m = manifest(ctx, &settings)?;
    m.key(cfg.key.fingerprint());
    if let Some(p) = &a.model {
        m.input(p)?;
    }
    let texts = read_jsonl(&a.texts)?;
    m.input(&a.texts)?;
    if texts.len() < repetitions {
        bail!("{} texts cannot be split into {repetitions} repetitions", texts.len());
    }
    let phi = match &a.filter {
        Some(p) => {
            m.input(p)?;
            Some(FilterSet::load(p)?)
        }
        None => None,
    };
    if a.no_dedup {
        eprintln!("{NO_DEDUP_BANNER}");
    }
    let opts = DetectOptions {
        dedup: !a.no_dedup,
        budget: settings.budget,
        chunk_docs: settings.chunk_docs,
        exec: ctx.exec,
        ..DetectOptions::new(supervision)
    };
    let suspect_local = match local {
        Some(model) if closed => Some(LocalSuspect::Closed(CopyingModel::new(model, copy_prob, copy_len)?)),
        Some(model) => Some(LocalSuspect::Open(model)),
        None => None,
    };
    let remote = match (&suspect_local, endpoint) {
        (None, Some(e)) => {
            let mut rc = RemoteConfig::new(e, vocab_size);
            rc.credentials = a.api_token.clone();
            Some(RemoteClient::new(rc))
        }
        _ => None,
    };
    let suspect = match (&suspect_local, &remote) {
        (Some(l), _) => Suspect::Local(l.model()),
        (None, Some(r)) => Suspect::Remote(r),
        (None, None) => unreachable!("clap requires a suspect"),
    };

    out_dir(&a.out_dir)?;
    let mut reports = Vec::with_capacity(repetitions);
    let mut failure = None;
    for chunk in chunks(&texts, repetitions) {
        let r = if closed {
            detect_closed(suspect, &prompts(chunk, prompt_len), &cfg, phi.as_ref(), &sampling, &opts)
        } else {
            detect_open(suspect, chunk, &cfg, &opts)
        };
        match r {
            Ok(r) => reports.push(r),
            Err(PipelineError::Remote { error, partial }) => {
                reports.push(*partial);
                failure = Some(error);
                break;
            }
            Err(e) => return Err(e.into()),
        }
    }
    let summary = summarize(&reports, !a.no_dedup)?;
    let report_path = a.out_dir.join("report.json");
    std::fs::write(
        &report_path,
        serde_json::to_string_pretty(&DetectOutput {
            summary: &summary,
            runs: &reports,
        })? + "\n",
    )?;
    let csv_path = a.out_dir.join("results.csv");
    std::fs::write(&csv_path, detect_csv(&reports))?;
    m.output(&report_path)?;
    m.output(&csv_path)?;
    m.write(&a.out_dir)?;
    if let Some(e) = failure {
        bail!(
            "remote suspect failed after {} of {repetitions} repetitions; partial report in {}: {e}",
            reports.len() - 1,
            report_path.display()
        );
    }
    if let [r] = reports.as_slice() {
        println!(
            "n_scored {} score {} p {:.3e} log10 p {:.2}",
            r.n_scored, r.score, r.p_value, r.log10_p
        );
        if let Some(f) = &r.filter_stats {
            println!("filter: {} k-grams, hit rate {:.3}", f.filter_size, f.hit_rate);
        }
    } else {
        println!(
            "{} repetitions: mean p {:.3}, mean log10 p {:.2} (sd {:.2})",
            summary.repetitions, summary.mean_p, summary.mean_log10_p, summary.sd_log10_p
        );
    }
    if a.no_dedup {
        eprintln!("{NO_DEDUP_BANNER}");
    }
    if summary.inconclusive == reports.len() {
        eprintln!("inconclusive: no tuple could be scored");
        return Ok(Outcome::Inconclusive);
    }
    Ok(Outcome::Ok)
}

fn mia(ctx: &Ctx, a: MiaArgs) -> Result<Outcome> {
    #[derive(Serialize)]
    struct MiaSettings {
        statistic: &'static str,
    }
    let mut m = manifest(
        ctx,
        &MiaSettings {
            statistic: "log-loss / zlib length, two-sample K-S",
        },
    )?;
    let model = NGramModel::load(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    m.input(&a.model)?;
    let candidates = read_jsonl(&a.candidates)?;
    m.input(&a.candidates)?;
    let fresh = read_jsonl(&a.fresh)?;
    m.input(&a.fresh)?;
    let report = mia_detect(&model, &candidates, &fresh, ctx.exec)?;
    out_dir(&a.out_dir)?;
    let path = a.out_dir.join("report.json");
    std::fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")?;
    m.output(&path)?;
    m.write(&a.out_dir)?;
    println!("K-S d {:.4} p {:.3e}", report.ks.d, report.ks.p);
    Ok(Outcome::Ok)
}

fn scenario(ctx: &Ctx, a: ScenarioArgs) -> Result<Outcome> {
    #[derive(Serialize)]
    struct ScenarioSettings {
        spec: PathBuf,
    }
    let mut m = manifest(ctx, &ScenarioSettings { spec: a.spec.clone() })?;
    m.input(&a.spec)?;
    let out = run_scenario(&a.spec, &a.out_dir, ctx.exec)
        .with_context(|| format!("scenario {}", a.spec.display()))?;
    for r in &out.rows {
        m.key(r.report.key_fingerprint.clone());
    }
    m.output(&out.results_csv)?;
    m.output(&out.summary_svg)?;
    m.write(&a.out_dir)?;
    println!(
        "{} runs; results in {}",
        out.rows.len(),
        out.results_csv.display()
    );
    Ok(Outcome::Ok)
}
