// SPDX-License-Identifier: MIT OR Apache-2.0

//! Command-line front end. Every subcommand writes its outputs plus a
//! `manifest.json` into `--output`.

pub mod manifest;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use manifest::{build_id, RunManifest, MANIFEST_NAME};

use crate::attribution::{
    upstream_ranking, BranchWeights, CreditLedger, ModeFilter, Target, TraceConfig, Tracer, CONFIG_NAMES,
};
use crate::decompose::stream_score_panel;
use crate::error::{Result, UnpackError};
use crate::eval::{self, report, Fixtures};
use crate::knockout::{self, AblationSpec, Channel};
use crate::model::toy::ToySpec;
use crate::model::{load_model, save_model, Activation, BlockLayout, CaptureFlags, ComponentId, Model, PositionScheme};

#[derive(Debug, Parser)]
#[command(name = "unpack", version, about = "Key-value credit attribution for GPT-style transformers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Token credit and strongest paths for a target logit.
    Trace(TraceArgs),
    /// Trace seeded at one component's output.
    Reroot(RerootArgs),
    /// IOI evaluation tables.
    Eval(EvalArgs),
    /// Communication-specific knockouts against panel strength.
    Knockout(KnockoutArgs),
    /// Communication-strength panel over a corpus.
    Score(ScoreArgs),
    /// Writes a random model in the container format.
    MakeToy(ToyArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// One of k_only_weighted, k_only_l2, k_only_aligned, kqv_weighted, kqv_l2, kqv_aligned.
    #[arg(long, default_value = "kqv_aligned")]
    pub config: String,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long = "tau-aggregate")]
    pub tau_aggregate: Option<f64>,
    #[arg(long)]
    pub topk: Option<usize>,
    /// Branch weights `wK,wQ,wV`.
    #[arg(long)]
    pub weights: Option<String>,
}

impl ConfigArgs {
    fn apply(&self, mut cfg: TraceConfig) -> Result<TraceConfig> {
        if let Some(b) = self.beta {
            cfg.beta = b;
        }
        if let Some(t) = self.tau {
            cfg.tau = t;
        }
        if let Some(t) = self.tau_aggregate {
            cfg.tau_aggregate = t;
        }
        if let Some(k) = self.topk {
            cfg.top_k_paths = k;
        }
        if let Some(w) = &self.weights {
            cfg.branch_weights = w.parse::<BranchWeights>()?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn build(&self, target: Target) -> Result<TraceConfig> {
        self.apply(TraceConfig::named(&self.config, target)?)
    }
}

#[derive(Debug, Args)]
pub struct InputArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Prompt text; BOS is prepended.
    #[arg(long, conflicts_with_all = ["file", "ids"])]
    pub text: Option<String>,
    /// File holding the prompt text.
    #[arg(long, conflicts_with = "ids")]
    pub file: Option<PathBuf>,
    /// Comma-separated token ids, used as given.
    #[arg(long)]
    pub ids: Option<String>,
    /// Position to trace; defaults to the last.
    #[arg(long)]
    pub position: Option<usize>,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct TraceArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Target token text (one token) or `#id`; defaults to the top prediction.
    #[arg(long)]
    pub target: Option<String>,
    /// Distractor token; the target becomes the logit difference.
    #[arg(long = "target-alt")]
    pub target_alt: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    #[value(name = "K", alias = "k")]
    K,
    #[value(name = "Q", alias = "q")]
    Q,
    #[value(name = "V", alias = "v")]
    V,
    #[value(name = "all")]
    All,
}

impl From<ModeArg> for ModeFilter {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::K => Self::K,
            ModeArg::Q => Self::Q,
            ModeArg::V => Self::V,
            ModeArg::All => Self::All,
        }
    }
}

#[derive(Debug, Args)]
pub struct RerootArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// `A8.H6`, `MLP3`.
    #[arg(long)]
    pub component: String,
    #[arg(long, value_enum, default_value = "all")]
    pub mode: ModeArg,
    /// Lowest layer of ranked upstream heads.
    #[arg(long = "layer-floor", default_value_t = 1)]
    pub layer_floor: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value = "ioi")]
    pub task: String,
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// `all` or a comma-separated list of config names.
    #[arg(long, default_value = "all")]
    pub configs: String,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub topk: Option<usize>,
    #[arg(long)]
    pub weights: Option<String>,
    /// Rerooting tables instead of the token tables.
    #[arg(long)]
    pub composition: bool,
    /// `start:stop:step` grid; runs the sweep instead of the token tables.
    #[arg(long = "beta-sweep")]
    pub beta_sweep: Option<String>,
    /// Row label for the per-model tables; defaults to the model directory name.
    #[arg(long)]
    pub label: Option<String>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct KnockoutArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Evaluation sentences, one per line.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Sentences for the strength panel; defaults to the evaluation corpus.
    #[arg(long = "score-corpus")]
    pub score_corpus: Option<PathBuf>,
    #[arg(long = "score-n", default_value_t = 50)]
    pub score_n: usize,
    #[arg(long = "per-layer", default_value_t = 5)]
    pub per_layer: usize,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub n: usize,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LayoutArg {
    Sequential,
    Parallel,
}

#[derive(Debug, Args)]
pub struct ToyArgs {
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    #[arg(long = "d-model", default_value_t = 16)]
    pub d_model: usize,
    #[arg(long = "d-head", default_value_t = 8)]
    pub d_head: usize,
    #[arg(long = "d-mlp", default_value_t = 32)]
    pub d_mlp: usize,
    /// At least 257 gives a byte-level tokenizer.
    #[arg(long, default_value_t = 300)]
    pub vocab: usize,
    #[arg(long, default_value_t = 64)]
    pub ctx: usize,
    #[arg(long, value_enum, default_value = "sequential")]
    pub layout: LayoutArg,
    /// Fraction of each head rotated; learned positions when absent.
    #[arg(long)]
    pub rotary: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub output: PathBuf,
}

/// Parses `args` (without the program name) and runs; returns the exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let args: Vec<String> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(std::iter::once("unpack".to_string()).chain(args.iter().cloned())) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command, &args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command, args: &[String]) -> Result<()> {
    match cmd {
        Command::Trace(a) => cmd_trace(&a, args),
        Command::Reroot(a) => cmd_reroot(&a, args),
        Command::Eval(a) => with_jobs(a.jobs, || cmd_eval(&a, args)),
        Command::Knockout(a) => with_jobs(a.jobs, || cmd_knockout(&a, args)),
        Command::Score(a) => with_jobs(a.jobs, || cmd_score(&a, args)),
        Command::MakeToy(a) => cmd_make_toy(&a, args),
    }
}

fn with_jobs<T: Send>(jobs: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    if jobs == 0 {
        return Err(UnpackError::InvalidArgument("--jobs must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| UnpackError::InvalidArgument(format!("thread pool: {e}")))?
        .install(f)
}

fn out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| UnpackError::io(dir, e))
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let file = File::create(path).map_err(|e| UnpackError::io(path, e))?;
    let mut w = BufWriter::new(file);
    f(&mut w).and_then(|()| w.flush()).map_err(|e| UnpackError::io(path, e))
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(UnpackError::InvalidArgument(format!("no such file: {}", path.display())))
    }
}

fn open_model(dir: &Path) -> Result<Model> {
    if !dir.is_dir() {
        return Err(UnpackError::InvalidArgument(format!(
            "model directory {} does not exist",
            dir.display()
        )));
    }
    load_model(dir)
}

fn input_ids(model: &Model, a: &InputArgs) -> Result<Vec<u32>> {
    if let Some(ids) = &a.ids {
        return ids
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<u32>()
                    .map_err(|_| UnpackError::InvalidArgument(format!("token id `{t}`")))
            })
            .collect();
    }
    let text = match (&a.text, &a.file) {
        (Some(t), _) => t.clone(),
        (None, Some(f)) => {
            require_file(f)?;
            std::fs::read_to_string(f).map_err(|e| UnpackError::io(f, e))?
        }
        (None, None) => return Err(UnpackError::InvalidArgument("give --text, --file or --ids".into())),
    };
    model.tokenize_with_bos(text.trim_end_matches('\n'))
}

/// `#id` or text that encodes to exactly one token.
fn token_arg(model: &Model, s: &str) -> Result<u32> {
    if let Some(id) = s.strip_prefix('#').and_then(|d| d.parse::<u32>().ok()) {
        return Ok(id);
    }
    match model.tokenize(s)?[..] {
        [id] => Ok(id),
        ref ids => Err(UnpackError::InvalidArgument(format!(
            "target `{s}` encodes to {} tokens; give a single token or #id",
            ids.len()
        ))),
    }
}

fn token_strings(model: &Model, ids: &[u32]) -> Vec<String> {
    ids.iter()
        .map(|&id| model.decode(&[id]).unwrap_or_else(|_| format!("#{id}")))
        .collect()
}

fn write_ledger(dir: &Path, ledger: &CreditLedger, tokens: &[String], filter: ModeFilter) -> Result<()> {
    write_file(&dir.join("token_credit.tsv"), |w| ledger.write_token_table(w, Some(tokens)))?;
    let mut kept = ledger.clone();
    kept.paths.retain(|p| filter.admits(p.root_entry_mode()));
    write_file(&dir.join("paths.jsonl"), |w| kept.write_paths(w))?;
    let summary = serde_json::json!({
        "root": ledger.root,
        "total_root_importance": ledger.total_root_importance,
        "n_paths_enumerated": ledger.n_paths_enumerated,
        "n_paths_kept": kept.paths.len(),
        "floor_trips": ledger.floor_trips,
        "lost_credit": ledger.lost_credit,
        "pruned_credit": ledger.pruned_credit,
    });
    write_file(&dir.join("summary.json"), |w| writeln!(w, "{summary:#}"))
}

fn cmd_trace(a: &TraceArgs, args: &[String]) -> Result<()> {
    let started = Instant::now();
    let model = open_model(&a.input.model)?;
    let ids = input_ids(&model, &a.input)?;
    let cap = model.forward(&ids, CaptureFlags::ALL)?;
    let pos = a.input.position.unwrap_or(ids.len() - 1);
    cap.check_pos(pos)?;
    let token = match &a.target {
        Some(t) => token_arg(&model, t)?,
        None => {
            let probs = cap.probs(pos);
            (0..probs.len()).fold(0, |best, i| if probs[i] > probs[best] { i } else { best }) as u32
        }
    };
    let target = match &a.target_alt {
        Some(alt) => Target::LogitDiff {
            token,
            distractor: token_arg(&model, alt)?,
        },
        None => Target::Single { token },
    };
    let cfg = a.cfg.build(target)?;
    let ledger = Tracer::new(&model, &cap, cfg.clone())?.trace(pos)?;
    out_dir(&a.input.output)?;
    write_ledger(&a.input.output, &ledger, &token_strings(&model, &ids), ModeFilter::All)?;
    let mut m = RunManifest::new("trace", args);
    m.configs.push(cfg);
    m.model_path = Some(a.input.model.clone());
    m.write(&a.input.output, started)
}

fn cmd_reroot(a: &RerootArgs, args: &[String]) -> Result<()> {
    let started = Instant::now();
    let model = open_model(&a.input.model)?;
    let component: ComponentId = a.component.parse()?;
    let ids = input_ids(&model, &a.input)?;
    let cap = model.forward(&ids, CaptureFlags::ALL)?;
    let pos = a.input.position.unwrap_or(ids.len() - 1);
    let cfg = a.cfg.build(Target::Single {
        token: model.config.bos_token_id,
    })?;
    let ledger = Tracer::new(&model, &cap, cfg.clone())?.reroot(component, pos)?;
    let filter = ModeFilter::from(a.mode);
    out_dir(&a.input.output)?;
    write_ledger(&a.input.output, &ledger, &token_strings(&model, &ids), filter)?;
    let roles = Fixtures::from_env().map(|f| f.roles).unwrap_or_default();
    let ranking = upstream_ranking(&ledger, filter, a.layer_floor);
    write_file(&a.input.output.join("upstream.tsv"), |w| {
        writeln!(w, "rank\tcomponent\trole\tcredit")?;
        for (i, (id, v)) in ranking.iter().enumerate() {
            writeln!(w, "{}\t{id}\t{}\t{v:.9e}", i + 1, roles.role_of(*id).unwrap_or("-"))?;
        }
        Ok(())
    })?;
    let mut m = RunManifest::new("reroot", args);
    m.configs.push(cfg);
    m.model_path = Some(a.input.model.clone());
    m.notes.push(format!("mode filter {filter}"));
    m.write(&a.input.output, started)
}

fn parse_configs(a: &EvalArgs, target: Target) -> Result<Vec<TraceConfig>> {
    let names: Vec<&str> = if a.configs == "all" {
        CONFIG_NAMES.to_vec()
    } else {
        a.configs.split(',').map(str::trim).collect()
    };
    let shared = ConfigArgs {
        config: String::new(),
        beta: a.beta,
        tau: a.tau,
        tau_aggregate: None,
        topk: a.topk,
        weights: a.weights.clone(),
    };
    names
        .into_iter()
        .map(|n| shared.apply(TraceConfig::named(n, target)?))
        .collect()
}

fn cmd_eval(a: &EvalArgs, args: &[String]) -> Result<()> {
    let started = Instant::now();
    if a.task != "ioi" {
        return Err(UnpackError::InvalidArgument(format!("unknown task `{}`; only ioi", a.task)));
    }
    let placeholder = Target::Single { token: 0 };
    let configs = parse_configs(a, placeholder)?;
    let grid = a.beta_sweep.as_deref().map(eval::metrics::parse_grid).transpose()?;
    let model = open_model(&a.model)?;
    let fixtures = Fixtures::from_env()?;
    let tok = model
        .tokenizer
        .as_ref()
        .ok_or_else(|| UnpackError::Tokenizer("eval needs a model tokenizer".into()))?;
    let pairs = eval::gen_prompts(tok, model.config.bos_token_id, &fixtures, a.seed, a.n)?;
    out_dir(&a.output)?;
    let label = a.label.clone().unwrap_or_else(|| {
        a.model
            .file_name()
            .map_or_else(|| "model".into(), |n| n.to_string_lossy().into_owned())
    });
    let meta = |extra: &str| {
        vec![
            ("model", label.clone()),
            ("prompts", format!("{} at seed {}", a.n, a.seed)),
            ("fixtures", fixtures.digest.clone()),
            ("targets", extra.to_string()),
        ]
    };
    let mut m = RunManifest::new("eval", args);
    m.model_path = Some(a.model.clone());
    m.seed = Some(a.seed);
    m.fixtures = Some(fixtures.digest.clone());
    m.notes.push(report::BOS_NOTE.into());
    write_file(&a.output.join("prompts.jsonl"), |w| {
        for p in &pairs {
            writeln!(w, "{}", serde_json::to_string(p).map_err(std::io::Error::other)?)?;
        }
        Ok(())
    })?;

    if a.composition {
        let cfg = configs[0].clone();
        let cells = eval::composition_verification(&model, &pairs, &cfg, &fixtures.roles, &eval::default_claims())?;
        let md = meta("rerooted at role heads; heads of layer >= 1 ranked");
        write_file(&a.output.join("composition_summary.tsv"), |w| {
            report::write_composition_summary(w, &cells, &report::SUMMARY_ROWS, &md)
        })?;
        write_file(&a.output.join("composition_matrix.tsv"), |w| {
            report::write_composition_matrix(w, &cells, &md)
        })?;
        write_records(&a.output.join("composition.jsonl"), &cells)?;
        m.configs.push(cfg);
    } else if let Some(grid) = grid {
        let base = configs[0].clone();
        let rows = eval::beta_sweep(&model, &pairs, &base, &grid)?;
        let md = meta("IO minus S for token metrics; S minus IO at S1 and S2");
        write_file(&a.output.join("beta_sweep.tsv"), |w| report::write_beta_table(w, &rows, &md))?;
        write_records(&a.output.join("beta_sweep.jsonl"), &rows)?;
        m.configs.push(base);
    } else {
        let reports = eval::evaluate(&model, &pairs, &configs)?;
        write_file(&a.output.join("token_attribution.tsv"), |w| {
            report::write_token_table(w, &reports, &meta("IO minus S"))
        })?;
        write_file(&a.output.join("s2_suppression.tsv"), |w| {
            report::write_suppression_table(w, &reports, &meta("S minus IO; C minus A and B minus A on ABC"))
        })?;
        if let Some(r) = reports.iter().find(|r| r.label == "kqv_aligned").or(reports.first()) {
            let md = meta(&format!("{} config", r.label));
            write_file(&a.output.join("model_token_attribution.tsv"), |w| {
                report::write_model_token_table(w, &[(label.clone(), r.metrics)], &md)
            })?;
            write_file(&a.output.join("model_s2_suppression.tsv"), |w| {
                report::write_model_suppression_table(w, &[(label.clone(), r.suppression)], &md)
            })?;
        }
        write_records(&a.output.join("reports.jsonl"), &reports)?;
        m.configs = configs;
    }
    m.write(&a.output, started)
}

fn write_records<T: serde::Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    write_file(path, |w| {
        for r in rows {
            writeln!(w, "{}", serde_json::to_string(r).map_err(std::io::Error::other)?)?;
        }
        Ok(())
    })
}

fn cmd_knockout(a: &KnockoutArgs, args: &[String]) -> Result<()> {
    let started = Instant::now();
    require_file(&a.corpus)?;
    if let Some(s) = &a.score_corpus {
        require_file(s)?;
    }
    let model = open_model(&a.model)?;
    let corpus = knockout::load_corpus(&model, &a.corpus)?;
    let mut specs = Vec::new();
    let mut panel = None;
    if a.per_layer > 0 {
        let mut score = knockout::load_corpus(&model, a.score_corpus.as_deref().unwrap_or(&a.corpus))?;
        score.truncate(a.score_n.max(1));
        let p = stream_score_panel(&model, &score)?;
        for channel in Channel::BOTH {
            specs.extend(
                knockout::select_knockout_components(&p, &model.config, channel, a.per_layer)
                    .into_iter()
                    .map(|component| AblationSpec { component, channel }),
            );
        }
        panel = Some(p);
    }
    let rep = knockout::delta_ppl(&model, &specs, &corpus, panel.as_ref())?;
    out_dir(&a.output)?;
    write_file(&a.output.join("knockout.tsv"), |w| knockout::write_results(w, &rep))?;
    let enough = Channel::BOTH
        .iter()
        .all(|c| rep.results.iter().filter(|r| r.spec.channel == *c).count() != 1);
    if !rep.results.is_empty() && enough {
        let corr = knockout::spearman_report(&rep.results)?;
        write_file(&a.output.join("correlations.tsv"), |w| knockout::write_correlations(w, &corr))?;
    }
    let mut m = RunManifest::new("knockout", args);
    m.model_path = Some(a.model.clone());
    m.notes.push(format!(
        "strength panel over {} score sentences; {} evaluation sentences",
        a.score_n, rep.n_sentences
    ));
    m.write(&a.output, started)
}

fn cmd_score(a: &ScoreArgs, args: &[String]) -> Result<()> {
    let started = Instant::now();
    require_file(&a.corpus)?;
    let model = open_model(&a.model)?;
    let mut corpus = knockout::load_corpus(&model, &a.corpus)?;
    corpus.truncate(a.n.max(1));
    let panel = stream_score_panel(&model, &corpus)?;
    out_dir(&a.output)?;
    panel.write_table(&model, &a.output.join("panel.tsv"))?;
    write_file(&a.output.join("strength.tsv"), |w| {
        writeln!(w, "component\tattn_strength\tmlp_strength")?;
        for k in 0..panel.n_components() {
            writeln!(
                w,
                "{}\t{:.9e}\t{:.9e}",
                panel.component(k),
                panel.attn_strength[k],
                panel.mlp_strength[k]
            )?;
        }
        Ok(())
    })?;
    let mut m = RunManifest::new("score", args);
    m.model_path = Some(a.model.clone());
    m.write(&a.output, started)
}

fn cmd_make_toy(a: &ToyArgs, args: &[String]) -> Result<()> {
    let started = Instant::now();
    let spec = ToySpec {
        n_layers: a.layers,
        n_heads: a.heads,
        d_model: a.d_model,
        d_head: a.d_head,
        d_mlp: a.d_mlp,
        vocab_size: a.vocab,
        n_ctx: a.ctx,
        block_layout: match a.layout {
            LayoutArg::Sequential => BlockLayout::Sequential,
            LayoutArg::Parallel => BlockLayout::Parallel,
        },
        position_scheme: match a.rotary {
            Some(fraction) => PositionScheme::Rotary {
                fraction,
                base: 10_000.0,
            },
            None => PositionScheme::Learned,
        },
        activation: Activation::Gelu,
        seed: a.seed,
        ..ToySpec::default()
    };
    let model = spec.build()?;
    save_model(&model, &a.output)?;
    let mut m = RunManifest::new("make-toy", args);
    m.seed = Some(a.seed);
    m.write(&a.output, started)
}
