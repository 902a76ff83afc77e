//! Command-line front end. `run` parses arguments, executes one subcommand and
//! returns the process exit code: 0 on success, 1 when any dump failed to
//! load or process, 2 on a usage or configuration error.

use std::collections::HashSet;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use prunekit_core::analysis::{
    attention_correlation, attention_sink_stats, identify_ref_tokens, ref_rank_distribution, retention_metrics,
    CorrelationMethod, RankHistogram, RefTokenSet, RetentionMetrics, SinkStats,
};
use prunekit_core::context::{HeadReduce, SoftmaxDomain};
use prunekit_core::dump::EncoderDump;
use prunekit_core::efficiency::{estimate_prefill_flops, speedup_report, FlopsProfile, SpeedupReport};
use prunekit_core::pruning::{prune, PruneConfig, PruneResult};
use prunekit_core::rng::derive_seed;
use prunekit_core::similarity::{visual_text_cosine, visual_text_similarity, SimilarityMatrix};
use prunekit_core::synth::{default_hotspots, generate_synthetic_dump, SynthSpec};
use serde::Serialize;

use crate::config::{self, ConfigError, FileConfig, FlagConfig, Format, LmFile, RunConfig, StrategySpec};
use crate::dump_io::{is_dump_dir, load_dump, save_dump};
use crate::report::{bar_chart, num, opt_num, write_csv, write_json};

pub const EXIT_OK: i32 = 0;
pub const EXIT_DATA: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "prunekit", version, about = "Text-guided visual token pruning over encoder dumps")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Prune each dump and write one result per dump.
    Prune(RunArgs),
    /// Rank histograms, attention sink statistics, correlation and retention.
    Analyze(RunArgs),
    /// Referent recall and precision for several strategies and budgets.
    Compare(RunArgs),
    /// Generate synthetic dumps with planted referent tokens.
    Synth(SynthArgs),
    /// Prefill FLOPs and KV cache size for a list of visual token budgets.
    Flops(FlopsArgs),
}

fn parse_domain(s: &str) -> Result<SoftmaxDomain, String> {
    match s {
        "candidates" => Ok(SoftmaxDomain::Candidates),
        "all" => Ok(SoftmaxDomain::All),
        _ => Err(format!("expected 'candidates' or 'all', got '{s}'")),
    }
}

fn parse_reduce(s: &str) -> Result<HeadReduce, String> {
    match s {
        "mean" => Ok(HeadReduce::Mean),
        "max" => Ok(HeadReduce::Max),
        _ => Err(format!("expected 'mean' or 'max', got '{s}'")),
    }
}

#[derive(Debug, Clone, Args)]
pub struct OutputArgs {
    /// TOML file with default settings; flags override it.
    #[arg(long, value_name = "TOML")]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Report formats, comma separated.
    #[arg(long, value_enum, value_delimiter = ',')]
    pub format: Vec<Format>,
    /// Worker threads; 0 uses every core.
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Dump directories, or directories whose subdirectories are dumps.
    #[arg(required = true, value_name = "DUMP")]
    pub inputs: Vec<PathBuf>,
    /// Strategy name; `compare` takes several (comma separated or repeated).
    /// `fixed_ratio:R` sets the similarity ratio of that entry.
    #[arg(long, value_delimiter = ',')]
    pub strategy: Vec<StrategySpec>,
    #[arg(long)]
    pub budget: Option<usize>,
    /// Budgets for `compare`, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub budgets: Vec<usize>,
    #[arg(long)]
    pub sim_ratio: Option<f64>,
    #[arg(long)]
    pub single_text_ratio: Option<f64>,
    /// Minimum mask overlap for a referent token.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Histogram bins for `analyze`.
    #[arg(long)]
    pub bins: Option<usize>,
    /// Seed of the random baseline; dump `i` uses `seed ^ i`.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true", value_name = "BOOL")]
    pub normalize_similarity: Option<bool>,
    #[arg(long, value_parser = parse_domain, value_name = "candidates|all")]
    pub softmax_domain: Option<SoftmaxDomain>,
    #[arg(long, value_parser = parse_reduce, value_name = "mean|max")]
    pub head_reduce: Option<HeadReduce>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// Destination; with `--count` above one, dumps go to `dump_NNNN` inside it.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Planted tokens of one referent, e.g. `0..31` (inclusive) or `3,7,9`.
    /// Repeat for more referents.
    #[arg(long, required = true, value_parser = config::parse_index_set)]
    pub planted: Vec<Vec<usize>>,
    /// Mask grid side; the dump has grid² tokens.
    #[arg(long, default_value_t = 24)]
    pub grid: usize,
    #[arg(long, default_value_t = 1)]
    pub texts: usize,
    #[arg(long, default_value_t = 64)]
    pub proj_dim: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 16)]
    pub head_dim: usize,
    /// Minimum similarity distance between planted and other tokens.
    #[arg(long, default_value_t = 0.5)]
    pub gap: f64,
    /// Number of context hotspots.
    #[arg(long, default_value_t = 16)]
    pub hotspots: usize,
    /// Dumps to generate; dump `i` uses seed `seed ^ i`.
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct FlopsArgs {
    /// Visual token counts; the first is the baseline.
    #[arg(long, value_delimiter = ',')]
    pub budgets: Vec<usize>,
    #[arg(long)]
    pub layers: Option<u64>,
    #[arg(long)]
    pub hidden: Option<u64>,
    #[arg(long)]
    pub ffn: Option<u64>,
    #[arg(long)]
    pub text_tokens: Option<u64>,
    #[arg(long)]
    pub bytes_per_value: Option<u64>,
    #[command(flatten)]
    pub output: OutputArgs,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match cli.command {
        Command::Prune(a) => with_config(&a, cmd_prune),
        Command::Analyze(a) => with_config(&a, cmd_analyze),
        Command::Compare(a) => with_config(&a, cmd_compare),
        Command::Synth(a) => cmd_synth(&a),
        Command::Flops(a) => cmd_flops(&a),
    }
}

fn usage(msg: impl std::fmt::Display) -> i32 {
    eprintln!("prunekit: {msg}");
    EXIT_USAGE
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig, ConfigError> {
    match path {
        Some(p) => FileConfig::load(p),
        None => Ok(FileConfig::default()),
    }
}

fn with_config(args: &RunArgs, cmd: fn(&RunConfig, &[Input]) -> i32) -> i32 {
    let file = match load_file_config(args.output.config.as_deref()) {
        Ok(f) => f,
        Err(e) => return usage(e),
    };
    let flags = FlagConfig {
        strategies: args.strategy.clone(),
        budget: args.budget,
        budgets: args.budgets.clone(),
        sim_ratio: args.sim_ratio,
        single_text_ratio: args.single_text_ratio,
        threshold: args.threshold,
        bins: args.bins,
        seed: args.seed,
        normalize_similarity: args.normalize_similarity,
        softmax_domain: args.softmax_domain,
        head_reduce: args.head_reduce,
        out: args.output.out.clone(),
        formats: args.output.format.clone(),
        jobs: args.output.jobs,
        lm: LmFile::default(),
    };
    let cfg = match RunConfig::resolve(flags, file) {
        Ok(c) => c,
        Err(e) => return usage(e),
    };
    let inputs = match expand_inputs(&args.inputs) {
        Ok(i) => i,
        Err(e) => return usage(e),
    };
    log::debug!("effective config: {cfg:?}");
    cmd(&cfg, &inputs)
}

/// One dump to process, with the name its reports are filed under.
#[derive(Debug, Clone)]
pub struct Input {
    pub name: String,
    pub path: PathBuf,
}

fn dir_name(p: &Path) -> String {
    p.components()
        .next_back()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .filter(|s| !s.is_empty() && s != "." && s != "..")
        .unwrap_or_else(|| "dump".to_string())
}

/// Dump directories are taken as given; other directories expand to their
/// dump subdirectories in name order.
fn expand_inputs(paths: &[PathBuf]) -> Result<Vec<Input>, String> {
    let mut out = Vec::new();
    for p in paths {
        if !is_dump_dir(p) && p.is_dir() {
            let mut subs: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(|e| format!("{}: {e}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|s| is_dump_dir(s))
                .collect();
            if !subs.is_empty() {
                subs.sort();
                out.extend(subs.into_iter().map(|s| Input {
                    name: dir_name(&s),
                    path: s,
                }));
                continue;
            }
        }
        out.push(Input {
            name: dir_name(p),
            path: p.clone(),
        });
    }
    let mut seen = HashSet::new();
    for i in &out {
        if !seen.insert(i.name.as_str()) {
            return Err(format!("two inputs share the name '{}'; reports would collide", i.name));
        }
    }
    Ok(out)
}

/// Runs `f` over `items` on `jobs` workers and returns results in input order.
pub fn par_map<T, R, F>(jobs: usize, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .expect("thread pool");
    pool.install(|| items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect())
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf, String> {
    let dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    Ok(dir)
}

/// Writes a report file, reporting failure on stderr.
fn emit(path: &Path, result: std::io::Result<()>, failed: &mut bool) {
    if let Err(e) = result {
        eprintln!("prunekit: {}: {e}", path.display());
        *failed = true;
    } else {
        log::info!("wrote {}", path.display());
    }
}

fn dump_config(cfg: &RunConfig, ordinal: usize) -> PruneConfig {
    let mut p = cfg.prune.clone();
    p.seed = derive_seed(p.seed, ordinal as u64);
    p
}

/// All referent tokens of the dump at `threshold`, or `None` without masks.
fn union_ref(dump: &EncoderDump, threshold: f64) -> Result<Option<RefTokenSet>, String> {
    if dump.mask_grids.is_empty() {
        return Ok(None);
    }
    let mut all = Vec::new();
    for (r, grid) in dump.mask_grids.iter().enumerate() {
        all.extend(identify_ref_tokens(grid, threshold, r).map_err(|e| e.to_string())?.indices);
    }
    all.sort_unstable();
    all.dedup();
    Ok(Some(RefTokenSet {
        indices: all,
        threshold,
        referent_id: usize::MAX,
    }))
}

fn log_warnings(name: &str, result: &PruneResult) {
    for w in &result.warnings {
        log::warn!("{name}: {w:?}");
    }
}

#[derive(Serialize)]
struct PruneReport<'a> {
    dump: &'a str,
    config: &'a RunConfig,
    tokens: usize,
    texts: usize,
    /// Seed actually given to the strategy for this dump.
    seed: u64,
    result: &'a PruneResult,
    #[serde(skip_serializing_if = "Option::is_none")]
    ref_tokens: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    retention: Option<RetentionMetrics>,
}

struct PruneOutcome {
    tokens: usize,
    texts: usize,
    seed: u64,
    result: PruneResult,
    ref_tokens: Option<usize>,
    retention: Option<RetentionMetrics>,
}

fn prune_one(cfg: &RunConfig, ordinal: usize, input: &Input) -> Result<PruneOutcome, String> {
    let dump = load_dump(&input.path).map_err(|e| e.to_string())?;
    let pcfg = dump_config(cfg, ordinal);
    let result = prune(&dump, &pcfg).map_err(|e| e.to_string())?;
    log_warnings(&input.name, &result);
    let refs = union_ref(&dump, cfg.threshold)?;
    let retention = refs.as_ref().map(|r| retention_metrics(&result, r));
    Ok(PruneOutcome {
        tokens: dump.tokens(),
        texts: dump.texts(),
        seed: pcfg.seed,
        result,
        ref_tokens: refs.map(|r| r.indices.len()),
        retention,
    })
}

fn cmd_prune(cfg: &RunConfig, inputs: &[Input]) -> i32 {
    if cfg.strategies.len() > 1 {
        return usage("prune takes one strategy; use compare for several");
    }
    let dir = match out_dir(cfg) {
        Ok(d) => d,
        Err(e) => return usage(e),
    };
    let outcomes = par_map(cfg.jobs, inputs, |i, input| prune_one(cfg, i, input));

    let mut failed = false;
    let mut rows = Vec::new();
    let mut recalls = Vec::new();
    for (input, outcome) in inputs.iter().zip(&outcomes) {
        let o = match outcome {
            Ok(o) => o,
            Err(e) => {
                eprintln!("prunekit: {}: {e}", input.name);
                failed = true;
                let mut row = vec![String::new(); 9];
                row[0] = input.name.clone();
                row[8] = "error".into();
                rows.push(row);
                continue;
            }
        };
        if cfg.wants(Format::Json) {
            let path = dir.join(format!("{}.prune.json", input.name));
            let report = PruneReport {
                dump: &input.name,
                config: cfg,
                tokens: o.tokens,
                texts: o.texts,
                seed: o.seed,
                result: &o.result,
                ref_tokens: o.ref_tokens,
                retention: o.retention,
            };
            emit(&path, write_json(&path, &report), &mut failed);
        }
        if let Some(m) = &o.retention {
            recalls.push((input.name.clone(), m.ref_recall));
        }
        rows.push(vec![
            input.name.clone(),
            o.tokens.to_string(),
            o.result.retained.len().to_string(),
            o.result.similarity_part.len().to_string(),
            o.result.context_part.len().to_string(),
            o.result.intersection_size.to_string(),
            opt_num(o.retention.map(|m| m.ref_recall)),
            opt_num(o.retention.map(|m| m.ref_precision)),
            "ok".into(),
        ]);
    }
    if cfg.wants(Format::Csv) {
        let path = dir.join("prune_summary.csv");
        let header = [
            "dump",
            "tokens",
            "retained",
            "similarity_part",
            "context_part",
            "intersection_size",
            "ref_recall",
            "ref_precision",
            "status",
        ];
        emit(&path, write_csv(&path, &header, &rows), &mut failed);
    }
    if cfg.wants(Format::Svg) {
        if recalls.is_empty() {
            log::warn!("no dump has referent masks; skipping recall chart");
        } else {
            let path = dir.join("prune_recall.svg");
            let title = format!("Referent recall, {} at budget {}", cfg.prune.strategy, cfg.prune.budget);
            emit(&path, std::fs::write(&path, bar_chart(&title, "ref recall", &recalls, Some(1.0))), &mut failed);
        }
    }

    let ok = outcomes.iter().filter(|o| o.is_ok()).count();
    let mut line = format!(
        "pruned {ok}/{} dumps: strategy={} budget={}",
        inputs.len(),
        cfg.strategies[0],
        cfg.prune.budget
    );
    if !recalls.is_empty() {
        let mean = recalls.iter().map(|r| r.1).sum::<f64>() / recalls.len() as f64;
        let _ = write!(line, " mean_ref_recall={}", num(mean));
    }
    println!("{line}");
    if failed {
        EXIT_DATA
    } else {
        EXIT_OK
    }
}

#[derive(Debug, Clone, Serialize)]
struct ReferentRanks {
    referent: usize,
    /// Text whose similarity row ranks the tokens; absent for `[CLS]` ranks.
    #[serde(skip_serializing_if = "Option::is_none")]
    text: Option<usize>,
    ref_tokens: usize,
    histogram: RankHistogram,
}

#[derive(Debug, Clone, Copy, Serialize)]
struct Correlation {
    pearson: Option<f64>,
    spearman: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
struct Analysis {
    tokens: usize,
    texts: usize,
    similarity_ranks: Vec<ReferentRanks>,
    cls_ranks: Vec<ReferentRanks>,
    sink: Option<SinkStats>,
    correlation: Correlation,
    retention: Option<RetentionMetrics>,
    notices: Vec<String>,
}

#[derive(Serialize)]
struct AnalysisReport<'a> {
    dump: &'a str,
    config: &'a RunConfig,
    #[serde(flatten)]
    analysis: &'a Analysis,
}

fn similarity_for(dump: &EncoderDump, cfg: &PruneConfig) -> Result<SimilarityMatrix, String> {
    let f = if cfg.normalize_similarity {
        visual_text_cosine
    } else {
        visual_text_similarity
    };
    f(&dump.eos_embeddings, &dump.projected_visual).map_err(|e| e.to_string())
}

fn analyze_one(cfg: &RunConfig, ordinal: usize, input: &Input) -> Result<Analysis, String> {
    let dump = load_dump(&input.path).map_err(|e| e.to_string())?;
    let mut notices = Vec::new();
    let n = dump.texts();
    let sims = similarity_for(&dump, &cfg.prune)?;

    let mut similarity_ranks = Vec::new();
    let mut cls_ranks = Vec::new();
    for (r, grid) in dump.mask_grids.iter().enumerate() {
        let refs = identify_ref_tokens(grid, cfg.threshold, r).map_err(|e| e.to_string())?;
        if n > 0 {
            let text = r % n;
            similarity_ranks.push(ReferentRanks {
                referent: r,
                text: Some(text),
                ref_tokens: refs.indices.len(),
                histogram: ref_rank_distribution(sims.row(text), &refs, cfg.bins).map_err(|e| e.to_string())?,
            });
        }
        cls_ranks.push(ReferentRanks {
            referent: r,
            text: None,
            ref_tokens: refs.indices.len(),
            histogram: ref_rank_distribution(&dump.cls_attention_row, &refs, cfg.bins).map_err(|e| e.to_string())?,
        });
    }
    if dump.mask_grids.is_empty() {
        notices.push("no mask grids: rank histograms and retention skipped".to_string());
    } else if n == 0 {
        notices.push("no texts: similarity rank histograms skipped".to_string());
    }

    let sink = match attention_sink_stats(&dump.eos_attention_rows, &dump.text_labels) {
        Ok(s) => Some(s),
        Err(e) => {
            notices.push(format!("sink statistics skipped: {e}"));
            None
        }
    };

    let mut correlation = Correlation {
        pearson: None,
        spearman: None,
    };
    if n == 0 {
        notices.push("no texts: correlation skipped".to_string());
    } else {
        for (method, slot) in [
            (CorrelationMethod::Pearson, &mut correlation.pearson),
            (CorrelationMethod::Spearman, &mut correlation.spearman),
        ] {
            match attention_correlation(&dump.cls_attention_row, sims.row(0), method) {
                Ok(c) => *slot = Some(c),
                Err(e) => notices.push(format!("{method:?} correlation skipped: {e}")),
            }
        }
    }

    let retention = match union_ref(&dump, cfg.threshold)? {
        Some(refs) => {
            let result = prune(&dump, &dump_config(cfg, ordinal)).map_err(|e| e.to_string())?;
            log_warnings(&input.name, &result);
            Some(retention_metrics(&result, &refs))
        }
        None => None,
    };
    for msg in &notices {
        log::info!("{}: {msg}", input.name);
    }
    Ok(Analysis {
        tokens: dump.tokens(),
        texts: n,
        similarity_ranks,
        cls_ranks,
        sink,
        correlation,
        retention,
        notices,
    })
}

#[derive(Serialize)]
struct AnalysisSummary<'a> {
    config: &'a RunConfig,
    dumps: Vec<&'a str>,
    failed: Vec<&'a str>,
    /// Similarity rank histogram over every referent of every dump with the
    /// token count of the first one.
    similarity_ranks: Option<RankHistogram>,
    cls_ranks: Option<RankHistogram>,
    sink: Option<SinkStats>,
    mean_pearson: Option<f64>,
    mean_spearman: Option<f64>,
    mean_ref_recall: Option<f64>,
}

fn merge_histograms<'a>(it: impl Iterator<Item = &'a RankHistogram>) -> Option<RankHistogram> {
    let mut acc: Option<RankHistogram> = None;
    for h in it {
        match &mut acc {
            None => acc = Some(h.clone()),
            Some(a) => {
                if a.accumulate(h).is_err() {
                    log::warn!("skipping histogram over {} tokens in the summary", h.tokens);
                }
            }
        }
    }
    acc
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn cmd_analyze(cfg: &RunConfig, inputs: &[Input]) -> i32 {
    let dir = match out_dir(cfg) {
        Ok(d) => d,
        Err(e) => return usage(e),
    };
    let outcomes = par_map(cfg.jobs, inputs, |i, input| analyze_one(cfg, i, input));

    let mut failed = false;
    let mut done: Vec<(&Input, &Analysis)> = Vec::new();
    let mut failures = Vec::new();
    for (input, outcome) in inputs.iter().zip(&outcomes) {
        match outcome {
            Ok(a) => done.push((input, a)),
            Err(e) => {
                eprintln!("prunekit: {}: {e}", input.name);
                failures.push(input.name.as_str());
                failed = true;
            }
        }
    }

    let summary = AnalysisSummary {
        config: cfg,
        dumps: done.iter().map(|(i, _)| i.name.as_str()).collect(),
        failed: failures,
        similarity_ranks: merge_histograms(done.iter().flat_map(|(_, a)| a.similarity_ranks.iter().map(|r| &r.histogram))),
        cls_ranks: merge_histograms(done.iter().flat_map(|(_, a)| a.cls_ranks.iter().map(|r| &r.histogram))),
        sink: done.iter().filter_map(|(_, a)| a.sink).reduce(|x, y| x.merge(&y)),
        mean_pearson: mean(done.iter().filter_map(|(_, a)| a.correlation.pearson)),
        mean_spearman: mean(done.iter().filter_map(|(_, a)| a.correlation.spearman)),
        mean_ref_recall: mean(done.iter().filter_map(|(_, a)| a.retention.map(|m| m.ref_recall))),
    };

    if cfg.wants(Format::Json) {
        for (input, a) in &done {
            let path = dir.join(format!("{}.analysis.json", input.name));
            let report = AnalysisReport {
                dump: &input.name,
                config: cfg,
                analysis: a,
            };
            emit(&path, write_json(&path, &report), &mut failed);
        }
        let path = dir.join("analysis_summary.json");
        emit(&path, write_json(&path, &summary), &mut failed);
    }
    if cfg.wants(Format::Csv) {
        let rows: Vec<Vec<String>> = done
            .iter()
            .map(|(input, a)| {
                vec![
                    input.name.clone(),
                    a.tokens.to_string(),
                    a.texts.to_string(),
                    opt_num(a.sink.map(|s| s.sos)),
                    opt_num(a.sink.map(|s| s.user)),
                    opt_num(a.sink.map(|s| s.res)),
                    opt_num(a.sink.map(|s| s.eos)),
                    opt_num(a.correlation.pearson),
                    opt_num(a.correlation.spearman),
                    opt_num(a.retention.map(|m| m.ref_recall)),
                    opt_num(a.retention.map(|m| m.ref_precision)),
                ]
            })
            .collect();
        let header = [
            "dump",
            "tokens",
            "texts",
            "sink_sos",
            "sink_user",
            "sink_res",
            "sink_eos",
            "pearson",
            "spearman",
            "ref_recall",
            "ref_precision",
        ];
        let path = dir.join("analysis_summary.csv");
        emit(&path, write_csv(&path, &header, &rows), &mut failed);

        let mut hrows = Vec::new();
        for (input, a) in &done {
            for (kind, list) in [("similarity", &a.similarity_ranks), ("cls", &a.cls_ranks)] {
                for rr in list.iter() {
                    let h = &rr.histogram;
                    for (b, count) in h.counts.iter().enumerate() {
                        hrows.push(vec![
                            input.name.clone(),
                            kind.to_string(),
                            rr.referent.to_string(),
                            rr.text.map(|t| t.to_string()).unwrap_or_default(),
                            b.to_string(),
                            num(h.edges[b]),
                            num(h.edges[b + 1]),
                            count.to_string(),
                        ]);
                    }
                }
            }
        }
        let header = ["dump", "kind", "referent", "text", "bin", "rank_lo", "rank_hi", "count"];
        let path = dir.join("rank_histograms.csv");
        emit(&path, write_csv(&path, &header, &hrows), &mut failed);
    }
    if cfg.wants(Format::Svg) {
        if let Some(h) = &summary.similarity_ranks {
            let bars: Vec<(String, f64)> = h
                .counts
                .iter()
                .enumerate()
                .map(|(b, &c)| (format!("{:.0}-{:.0}", h.edges[b], h.edges[b + 1]), c as f64))
                .collect();
            let path = dir.join("rank_histogram.svg");
            let svg = bar_chart("Referent token ranks by similarity (0 = most similar)", "tokens", &bars, None);
            emit(&path, std::fs::write(&path, svg), &mut failed);
        }
        if let Some(s) = &summary.sink {
            let bars = vec![
                ("SOS".to_string(), s.sos),
                ("USER".to_string(), s.user),
                ("RES".to_string(), s.res),
                ("EOS".to_string(), s.eos),
            ];
            let path = dir.join("sink.svg");
            let svg = bar_chart("[EOS] attention by text token category", "mean mass", &bars, Some(1.0));
            emit(&path, std::fs::write(&path, svg), &mut failed);
        }
    }

    let mut line = format!("analyzed {}/{} dumps", done.len(), inputs.len());
    if let Some(s) = &summary.sink {
        let _ = write!(
            line,
            ": sink SOS={} USER={} RES={} EOS={}",
            num(s.sos),
            num(s.user),
            num(s.res),
            num(s.eos)
        );
    }
    if let Some(p) = summary.mean_pearson {
        let _ = write!(line, " pearson={}", num(p));
    }
    if let Some(r) = summary.mean_ref_recall {
        let _ = write!(line, " mean_ref_recall={}", num(r));
    }
    println!("{line}");
    if failed {
        EXIT_DATA
    } else {
        EXIT_OK
    }
}

#[derive(Debug, Clone, Serialize)]
struct CompareCell {
    strategy: String,
    budget: usize,
    ref_recall: f64,
    ref_precision: f64,
    retained: usize,
}

#[derive(Debug, Clone, Serialize)]
struct CompareRow {
    strategy: String,
    budget: usize,
    dumps: usize,
    mean_ref_recall: f64,
    mean_ref_precision: f64,
    min_ref_recall: f64,
}

#[derive(Serialize)]
struct PerDump<'a> {
    dump: &'a str,
    ref_tokens: usize,
    cells: &'a [CompareCell],
}

#[derive(Serialize)]
struct CompareReport<'a> {
    config: &'a RunConfig,
    rows: &'a [CompareRow],
    failed: Vec<&'a str>,
    per_dump: Vec<PerDump<'a>>,
}

fn compare_budgets(cfg: &RunConfig) -> Vec<usize> {
    if cfg.budgets.is_empty() {
        vec![cfg.prune.budget]
    } else {
        cfg.budgets.clone()
    }
}

fn compare_one(cfg: &RunConfig, ordinal: usize, input: &Input) -> Result<(usize, Vec<CompareCell>), String> {
    let dump = load_dump(&input.path).map_err(|e| e.to_string())?;
    let refs = union_ref(&dump, cfg.threshold)?.ok_or("no mask grids; compare needs referent masks")?;
    let base = dump_config(cfg, ordinal);
    let mut cells = Vec::new();
    for spec in &cfg.strategies {
        for &budget in &compare_budgets(cfg) {
            let mut pcfg = spec.apply(&base);
            pcfg.budget = budget;
            let result = prune(&dump, &pcfg).map_err(|e| format!("{spec} at budget {budget}: {e}"))?;
            log_warnings(&input.name, &result);
            let m = retention_metrics(&result, &refs);
            cells.push(CompareCell {
                strategy: spec.label(),
                budget,
                ref_recall: m.ref_recall,
                ref_precision: m.ref_precision,
                retained: result.retained.len(),
            });
        }
    }
    Ok((refs.indices.len(), cells))
}

fn cmd_compare(cfg: &RunConfig, inputs: &[Input]) -> i32 {
    if cfg.strategies.len() < 2 {
        return usage("compare needs at least two strategies, e.g. --strategy adaptive,high_similarity");
    }
    let dir = match &cfg.out {
        Some(_) => match out_dir(cfg) {
            Ok(d) => Some(d),
            Err(e) => return usage(e),
        },
        None => None,
    };
    let outcomes = par_map(cfg.jobs, inputs, |i, input| compare_one(cfg, i, input));

    let mut failed = false;
    let mut failures = Vec::new();
    let mut per_dump = Vec::new();
    for (input, outcome) in inputs.iter().zip(&outcomes) {
        match outcome {
            Ok((refs, cells)) => per_dump.push(PerDump {
                dump: &input.name,
                ref_tokens: *refs,
                cells,
            }),
            Err(e) => {
                eprintln!("prunekit: {}: {e}", input.name);
                failures.push(input.name.as_str());
                failed = true;
            }
        }
    }

    let cells_per_dump = cfg.strategies.len() * compare_budgets(cfg).len();
    let rows: Vec<CompareRow> = (0..cells_per_dump)
        .map(|c| {
            let cells: Vec<&CompareCell> = per_dump.iter().map(|d| &d.cells[c]).collect();
            let first = cells.first();
            let n = cells.len();
            let avg = |f: fn(&CompareCell) -> f64| {
                if n == 0 {
                    f64::NAN
                } else {
                    cells.iter().map(|c| f(c)).sum::<f64>() / n as f64
                }
            };
            let spec = &cfg.strategies[c / compare_budgets(cfg).len()];
            let budget = compare_budgets(cfg)[c % compare_budgets(cfg).len()];
            debug_assert!(first.is_none_or(|f| f.budget == budget));
            CompareRow {
                strategy: spec.label(),
                budget,
                dumps: n,
                mean_ref_recall: avg(|c| c.ref_recall),
                mean_ref_precision: avg(|c| c.ref_precision),
                min_ref_recall: cells.iter().map(|c| c.ref_recall).fold(f64::NAN, f64::min),
            }
        })
        .collect();

    let header = [
        "strategy",
        "budget",
        "dumps",
        "mean_ref_recall",
        "mean_ref_precision",
        "min_ref_recall",
    ];
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.strategy.clone(),
                r.budget.to_string(),
                r.dumps.to_string(),
                num(r.mean_ref_recall),
                num(r.mean_ref_precision),
                num(r.min_ref_recall),
            ]
        })
        .collect();
    print!("{}", crate::report::csv_string(&header, &table));

    if let Some(dir) = dir {
        if cfg.wants(Format::Json) {
            let path = dir.join("compare.json");
            let report = CompareReport {
                config: cfg,
                rows: &rows,
                failed: failures.clone(),
                per_dump,
            };
            emit(&path, write_json(&path, &report), &mut failed);
        }
        if cfg.wants(Format::Csv) {
            let path = dir.join("compare.csv");
            emit(&path, write_csv(&path, &header, &table), &mut failed);
        }
        if cfg.wants(Format::Svg) {
            let bars: Vec<(String, f64)> = rows
                .iter()
                .map(|r| (format!("{}@{}", r.strategy, r.budget), r.mean_ref_recall))
                .collect();
            let path = dir.join("compare.svg");
            emit(
                &path,
                std::fs::write(&path, bar_chart("Mean referent recall", "ref recall", &bars, Some(1.0))),
                &mut failed,
            );
        }
    }
    if failed {
        EXIT_DATA
    } else {
        EXIT_OK
    }
}

fn cmd_synth(args: &SynthArgs) -> i32 {
    if args.count == 0 {
        return usage("--count must be at least 1");
    }
    let tokens = args.grid * args.grid;
    let spec = SynthSpec {
        grid_side: args.grid,
        proj_dim: args.proj_dim,
        heads: args.heads,
        head_dim: args.head_dim,
        texts: args.texts,
        planted_ref: args.planted.clone(),
        similarity_gap: args.gap,
        context_hotspots: default_hotspots(tokens, &args.planted, args.hotspots),
        seed: args.seed,
    };
    let targets: Vec<(u64, PathBuf)> = if args.count == 1 {
        vec![(args.seed, args.out.clone())]
    } else {
        (0..args.count)
            .map(|i| (derive_seed(args.seed, i as u64), args.out.join(format!("dump_{i:04}"))))
            .collect()
    };

    enum Failure {
        Spec(String),
        Io(String),
    }
    let outcomes = par_map(args.jobs.unwrap_or(0), &targets, |_, (seed, dir)| {
        let spec = SynthSpec {
            seed: *seed,
            ..spec.clone()
        };
        let dump = generate_synthetic_dump(&spec).map_err(|e| Failure::Spec(e.to_string()))?;
        save_dump(&dump, dir).map_err(|e| Failure::Io(format!("{}: {e}", dir.display())))
    });
    let mut code = EXIT_OK;
    for outcome in outcomes {
        match outcome {
            Ok(()) => {}
            Err(Failure::Spec(e)) => {
                // Every target shares the spec, so one report is enough.
                return usage(format!("infeasible synthetic spec: {e}"));
            }
            Err(Failure::Io(e)) => {
                eprintln!("prunekit: {e}");
                code = EXIT_DATA;
            }
        }
    }
    if code == EXIT_OK {
        println!(
            "wrote {} synthetic dump(s) with {} tokens to {}",
            args.count,
            tokens,
            args.out.display()
        );
    }
    code
}

#[derive(Debug, Clone, Serialize)]
struct FlopsRow {
    #[serde(flatten)]
    profile: FlopsProfile,
    #[serde(flatten)]
    speedup: SpeedupReport,
}

#[derive(Serialize)]
struct FlopsReport<'a> {
    config: &'a RunConfig,
    baseline_tokens: usize,
    rows: &'a [FlopsRow],
    assumptions: Vec<String>,
}

fn cmd_flops(args: &FlopsArgs) -> i32 {
    let file = match load_file_config(args.output.config.as_deref()) {
        Ok(f) => f,
        Err(e) => return usage(e),
    };
    let flags = FlagConfig {
        budgets: args.budgets.clone(),
        out: args.output.out.clone(),
        formats: args.output.format.clone(),
        jobs: args.output.jobs,
        lm: LmFile {
            layers: args.layers,
            hidden: args.hidden,
            ffn: args.ffn,
            text_tokens: args.text_tokens,
            bytes_per_value: args.bytes_per_value,
        },
        ..Default::default()
    };
    let mut cfg = match RunConfig::resolve(flags, file) {
        Ok(c) => c,
        Err(e) => return usage(e),
    };
    if cfg.budgets.is_empty() {
        cfg.budgets = config::DEFAULT_FLOPS_BUDGETS.to_vec();
    }
    let lm = cfg.lm;
    if lm.layers == 0 || lm.hidden == 0 {
        return usage("layers and hidden size must be positive");
    }
    let base = estimate_prefill_flops(&lm, cfg.budgets[0] as u64);
    let rows: Vec<FlopsRow> = cfg
        .budgets
        .iter()
        .map(|&b| {
            let profile = estimate_prefill_flops(&lm, b as u64);
            FlopsRow {
                profile,
                speedup: speedup_report(&base, &profile),
            }
        })
        .collect();
    let assumptions = vec![format!(
        "text_tokens={} is an assumed prompt length added to every visual count",
        lm.text_tokens
    )];

    let header = [
        "visual_tokens",
        "token_count",
        "total_flops",
        "kv_cache_bytes",
        "flops_ratio",
        "kv_ratio",
    ];
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.profile.visual_tokens.to_string(),
                r.profile.token_count.to_string(),
                format!("{:.6e}", r.profile.total_flops),
                format!("{:.0}", r.profile.kv_cache_bytes),
                num(r.speedup.flops_ratio),
                num(r.speedup.kv_ratio),
            ]
        })
        .collect();
    print!("{}", crate::report::csv_string(&header, &table));
    for a in &assumptions {
        println!("# assumption: {a}");
    }

    let mut failed = false;
    if cfg.out.is_some() {
        let dir = match out_dir(&cfg) {
            Ok(d) => d,
            Err(e) => return usage(e),
        };
        if cfg.wants(Format::Json) {
            let path = dir.join("flops.json");
            let report = FlopsReport {
                config: &cfg,
                baseline_tokens: cfg.budgets[0],
                rows: &rows,
                assumptions: assumptions.clone(),
            };
            emit(&path, write_json(&path, &report), &mut failed);
        }
        if cfg.wants(Format::Csv) {
            let path = dir.join("flops.csv");
            emit(&path, write_csv(&path, &header, &table), &mut failed);
        }
        if cfg.wants(Format::Svg) {
            let bars: Vec<(String, f64)> = rows
                .iter()
                .map(|r| (r.profile.visual_tokens.to_string(), r.speedup.flops_ratio))
                .collect();
            let path = dir.join("flops.svg");
            let title = format!("Prefill FLOPs reduction vs {} visual tokens", cfg.budgets[0]);
            emit(&path, std::fs::write(&path, bar_chart(&title, "ratio", &bars, None)), &mut failed);
        }
    }
    if failed {
        EXIT_DATA
    } else {
        EXIT_OK
    }
}
