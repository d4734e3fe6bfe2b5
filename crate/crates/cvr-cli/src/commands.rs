use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use cvr_core::episode::{
    read_trajectory_log, run_episode, write_trajectory_jsonl, EpisodeConfig, EpisodeInputs,
    SimEnvironment, TrajectorySummary, DEFAULT_MASTER_PROMPT,
};
use cvr_core::eval::{
    aggregate, build_alignment, default_dimension_map, fmt_pct1, fmt_pct2, AggregateOptions,
    EvalInstance, EvalReport, WeightingMode,
};
use cvr_core::grpo::train::{train, TrainOptions};
use cvr_core::grpo::{GrpoConfig, StateKeyConfig};
use cvr_core::policy::{PolicyBuildContext, PolicyRegistry, RemotePolicyConfig};
use cvr_core::script::generate::{GeneratorKnobs, GeneratorRegistry};
use cvr_core::script::{validate_script, SemanticScript};

#[derive(Parser)]
#[command(name = "cvr", about = "Cross-video reasoning pipeline", version)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum OutputFormat {
    Table,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a template-script corpus.
    GenScripts {
        /// Generator family (e.g. alignment_interval, choice_behavior).
        #[arg(long)]
        family: String,
        #[arg(long)]
        count: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory, one script JSON per file.
        #[arg(long)]
        out: PathBuf,
        /// Videos per script (family default when omitted).
        #[arg(long)]
        videos: Option<u32>,
        #[arg(long)]
        duration_min: Option<f64>,
        #[arg(long)]
        duration_max: Option<f64>,
        /// Events per video.
        #[arg(long)]
        events: Option<u32>,
    },
    /// Validate script files; non-zero exit on any violation.
    ValidateScripts {
        /// Script files (single JSON object or JSONL corpus per file).
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
    /// Run one episode against the deterministic simulator.
    RunEpisode {
        #[arg(long)]
        script: PathBuf,
        /// Policy spec: scripted:FILE, softmax:PARAMS, or remote.
        #[arg(long)]
        policy: String,
        /// JSON config mirroring the episode fields, plus an optional
        /// "remote" block.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Trajectory log (JSONL) output path.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// File overriding the built-in task prompt.
        #[arg(long)]
        system_prompt: Option<PathBuf>,
    },
    /// Train the tabular softmax policy on a script corpus.
    Train {
        /// Directory of script JSON files.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        grpo_config: Option<PathBuf>,
        #[arg(long)]
        episode_config: Option<PathBuf>,
        /// Where to write the trained parameters.
        #[arg(long)]
        out: PathBuf,
        /// Where to write the per-iteration training curves (CSV).
        #[arg(long)]
        history: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Stop early once the iteration mean total reward reaches this.
        #[arg(long)]
        stop_at: Option<f64>,
    },
    /// Aggregate trajectory logs into the benchmark metrics.
    Eval {
        /// Directory of trajectory JSONL logs.
        #[arg(long)]
        logs: PathBuf,
        /// JSON map of task tag to dimension; built-in map when omitted.
        #[arg(long)]
        dimension_map: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = OutputFormat::Table)]
        format: OutputFormat,
        /// Weight dimension averages by instance counts.
        #[arg(long)]
        weighted: bool,
        #[arg(long, default_value_t = 0.5)]
        iou_threshold: f64,
    },
    /// Compare paired simulated and real trajectory logs.
    SimVsReal {
        #[arg(long)]
        sim_logs: PathBuf,
        #[arg(long)]
        real_logs: PathBuf,
        #[arg(long, value_enum, default_value_t = OutputFormat::Table)]
        format: OutputFormat,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenScripts {
            family,
            count,
            seed,
            out,
            videos,
            duration_min,
            duration_max,
            events,
        } => gen_scripts(
            &family,
            count,
            seed,
            &out,
            videos,
            duration_min,
            duration_max,
            events,
        ),
        Command::ValidateScripts { paths } => validate_scripts(&paths),
        Command::RunEpisode {
            script,
            policy,
            config,
            log,
            seed,
            system_prompt,
        } => run_episode_cmd(
            &script,
            &policy,
            config.as_deref(),
            log.as_deref(),
            seed,
            system_prompt.as_deref(),
        ),
        Command::Train {
            corpus,
            grpo_config,
            episode_config,
            out,
            history,
            seed,
            stop_at,
        } => train_cmd(
            &corpus,
            grpo_config.as_deref(),
            episode_config.as_deref(),
            &out,
            &history,
            seed,
            stop_at,
        ),
        Command::Eval {
            logs,
            dimension_map,
            format,
            weighted,
            iou_threshold,
        } => eval_cmd(
            &logs,
            dimension_map.as_deref(),
            format,
            weighted,
            iou_threshold,
        ),
        Command::SimVsReal {
            sim_logs,
            real_logs,
            format,
        } => sim_vs_real_cmd(&sim_logs, &real_logs, format),
    }
}

#[allow(clippy::too_many_arguments)]
fn gen_scripts(
    family: &str,
    count: u64,
    seed: u64,
    out: &Path,
    videos: Option<u32>,
    duration_min: Option<f64>,
    duration_max: Option<f64>,
    events: Option<u32>,
) -> Result<()> {
    let registry = GeneratorRegistry::with_builtins();
    let generator = registry.get(family).ok_or_else(|| {
        anyhow!(
            "unknown family `{family}`; known: {:?}",
            registry.families()
        )
    })?;
    let mut knobs = GeneratorKnobs {
        video_count: videos,
        ..GeneratorKnobs::default()
    };
    if let Some(lo) = duration_min {
        knobs.duration_range.0 = lo;
    }
    if let Some(hi) = duration_max {
        knobs.duration_range.1 = hi;
    }
    if let Some(e) = events {
        knobs.events_per_video = e;
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for i in 0..count {
        let script = generator.generate(seed + i, &knobs)?;
        let path = out.join(format!("{}.json", script.script_id));
        fs::write(&path, script.to_canonical_string())
            .with_context(|| format!("writing {}", path.display()))?;
    }
    println!("wrote {count} {family} script(s) to {}", out.display());
    Ok(())
}

fn validate_scripts(paths: &[PathBuf]) -> Result<()> {
    let mut failures = 0usize;
    for path in paths {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let docs =
            parse_script_documents(&text).with_context(|| format!("parsing {}", path.display()))?;
        let mut ids = BTreeMap::new();
        let mut file_ok = true;
        for (idx, doc) in docs.iter().enumerate() {
            match validate_script(doc) {
                Ok(script) => {
                    if let Some(previous) = ids.insert(script.script_id.clone(), idx) {
                        file_ok = false;
                        println!(
                            "{}: entry {idx}: script_id `{}` duplicates entry {previous}",
                            path.display(),
                            script.script_id
                        );
                    }
                }
                Err(errors) => {
                    file_ok = false;
                    for e in &errors.0 {
                        println!("{}: entry {idx}: {e}", path.display());
                    }
                }
            }
        }
        if file_ok {
            println!("{}: OK ({} script(s))", path.display(), docs.len());
        } else {
            failures += 1;
        }
    }
    if failures > 0 {
        bail!("{failures} file(s) failed validation");
    }
    Ok(())
}

fn parse_script_documents(text: &str) -> Result<Vec<serde_json::Value>> {
    let trimmed = text.trim();
    if trimmed.is_empty() {
        bail!("empty file");
    }
    // Whole-file JSON first; otherwise one JSON object per line.
    if let Ok(value) = serde_json::from_str::<serde_json::Value>(trimmed) {
        return Ok(vec![value]);
    }
    trimmed
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| anyhow!("bad JSONL line: {e}")))
        .collect()
}

#[derive(Deserialize, Default)]
struct RunConfigFile {
    #[serde(flatten)]
    episode: Option<EpisodeConfig>,
    remote: Option<RemotePolicyConfig>,
    state_keys: Option<StateKeyConfig>,
}

fn load_script(path: &Path) -> Result<SemanticScript> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    validate_script(&value).map_err(|e| anyhow!("{}: invalid script:\n{e}", path.display()))
}

fn run_episode_cmd(
    script_path: &Path,
    policy_spec: &str,
    config_path: Option<&Path>,
    log_path: Option<&Path>,
    seed: u64,
    system_prompt_path: Option<&Path>,
) -> Result<()> {
    let script = load_script(script_path)?;
    let config_file: RunConfigFile = match config_path {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => RunConfigFile::default(),
    };
    let episode_config = config_file.episode.unwrap_or_default();
    let system_prompt = match system_prompt_path {
        Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        // The remote backend carries the task prompt itself; other backends
        // see it in the rendered state.
        None if policy_spec.starts_with("remote") => String::new(),
        None => DEFAULT_MASTER_PROMPT.to_string(),
    };

    let registry = PolicyRegistry::with_builtins();
    let build_ctx = PolicyBuildContext {
        script: Some(&script),
        remote: config_file.remote,
        state_keys: config_file.state_keys.unwrap_or_default(),
    };
    let mut policy = registry
        .build(policy_spec, &build_ctx)
        .map_err(|e| anyhow!("building policy: {e}"))?;

    let environment = SimEnvironment { script: &script };
    let inputs = EpisodeInputs::from_script(&script, &system_prompt);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trajectory = run_episode(
        &inputs,
        policy.as_mut(),
        &environment,
        &episode_config,
        &mut rng,
    );

    if let Some(path) = log_path {
        let mut file =
            fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
        write_trajectory_jsonl(&trajectory, Some(&script.gold), &mut file)?;
    }
    let answer_text = trajectory
        .final_answer()
        .map(|a| a.to_wire_value().to_string())
        .unwrap_or_else(|| "ABSTAIN".to_string());
    println!(
        "script {} | turns {} | tool calls {} | answer {} | format_valid_all {}",
        trajectory.script_id,
        trajectory.turns.len(),
        trajectory.tool_calls,
        answer_text,
        trajectory.format_valid_all,
    );
    if trajectory.errored() {
        bail!("episode errored");
    }
    Ok(())
}

fn load_corpus(dir: &Path) -> Result<Vec<SemanticScript>> {
    let mut scripts = Vec::new();
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    entries.sort();
    for path in entries {
        scripts.push(load_script(&path)?);
    }
    if scripts.is_empty() {
        bail!("no .json scripts in {}", dir.display());
    }
    Ok(scripts)
}

fn train_cmd(
    corpus_dir: &Path,
    grpo_config_path: Option<&Path>,
    episode_config_path: Option<&Path>,
    out: &Path,
    history_path: &Path,
    seed: u64,
    stop_at: Option<f64>,
) -> Result<()> {
    let corpus = load_corpus(corpus_dir)?;
    let grpo_config: GrpoConfig = match grpo_config_path {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => GrpoConfig::default(),
    };
    let episode_config: EpisodeConfig = match episode_config_path {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => EpisodeConfig::default(),
    };
    let options = TrainOptions {
        seed,
        stop_at_mean_reward: stop_at,
        ..TrainOptions::default()
    };
    let outcome = train(&corpus, &grpo_config, &episode_config, &options)?;

    let mut params_file =
        fs::File::create(out).with_context(|| format!("creating {}", out.display()))?;
    outcome.params.save(&mut params_file)?;
    let mut history_file = fs::File::create(history_path)
        .with_context(|| format!("creating {}", history_path.display()))?;
    outcome.history.write_csv(&mut history_file)?;

    if let Some(last) = outcome.history.rows.last() {
        println!(
            "trained {} iteration(s) | mean_r_total {:.4} | entropy {:.4} | kl {:.6}",
            outcome.history.rows.len(),
            last.mean_r_total,
            last.entropy,
            last.kl_to_ref,
        );
    }
    println!("params -> {}", out.display());
    println!("history -> {}", history_path.display());
    Ok(())
}

fn load_log_dir(dir: &Path) -> Result<Vec<TrajectorySummary>> {
    let mut summaries = Vec::new();
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    entries.sort();
    for path in entries {
        let file = fs::File::open(&path).with_context(|| format!("opening {}", path.display()))?;
        let mut from_file = read_trajectory_log(BufReader::new(file))
            .with_context(|| format!("parsing {}", path.display()))?;
        summaries.append(&mut from_file);
    }
    if summaries.is_empty() {
        bail!("no trajectory logs found in {}", dir.display());
    }
    Ok(summaries)
}

fn eval_cmd(
    logs: &Path,
    dimension_map_path: Option<&Path>,
    format: OutputFormat,
    weighted: bool,
    iou_threshold: f64,
) -> Result<()> {
    let summaries = load_log_dir(logs)?;
    let dimension_map: BTreeMap<String, String> = match dimension_map_path {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => default_dimension_map(),
    };
    let mut instances = Vec::new();
    let mut skipped = 0usize;
    for s in summaries {
        let Some(gold) = s.gold.clone() else {
            skipped += 1;
            continue;
        };
        if s.errored {
            skipped += 1;
            continue;
        }
        instances.push(EvalInstance {
            task_tag: s.task_tag.clone(),
            gold,
            predicted: s.final_answer.clone(),
            detail: None,
        });
    }
    let options = AggregateOptions {
        weighting: if weighted {
            WeightingMode::InstanceWeighted
        } else {
            WeightingMode::Unweighted
        },
        iou_threshold,
        ..AggregateOptions::default()
    };
    let report = aggregate(&instances, &dimension_map, &options)?;
    match format {
        OutputFormat::Json => println!("{}", serde_json::to_string_pretty(&report)?),
        OutputFormat::Table => print_report_table(&report, skipped),
    }
    Ok(())
}

fn print_report_table(report: &EvalReport, skipped: usize) {
    println!("{:<8} {:>6} {:>10} {:>10}", "task", "n", "acc%", "mean_iou");
    for t in &report.tasks {
        let detail = t
            .mean_detail
            .map(|d| format!("{d:.3}"))
            .unwrap_or_else(|| "-".to_string());
        println!(
            "{:<8} {:>6} {:>10} {:>10}",
            t.task_tag,
            t.n,
            fmt_pct2(t.accuracy),
            detail
        );
    }
    for (dim, avg) in &report.dimension_avgs {
        println!("{dim}.Avg = {}", fmt_pct2(*avg));
    }
    println!("O.Avg = {}", fmt_pct2(report.overall_avg));
    if skipped > 0 {
        println!("({skipped} log entr(y/ies) skipped: no gold or errored)");
    }
}

fn sim_vs_real_cmd(sim_logs: &Path, real_logs: &Path, format: OutputFormat) -> Result<()> {
    let sims = load_log_dir(sim_logs)?;
    let reals = load_log_dir(real_logs)?;
    let block = build_alignment(&sims, &reals)?;

    match format {
        OutputFormat::Json => println!("{}", serde_json::to_string_pretty(&block)?),
        OutputFormat::Table => {
            if let Some(v) = block.decision_overlap_pct {
                println!(
                    "Decision Overlap Rate: {}% over {} pair(s)",
                    fmt_pct1(v),
                    block.discrete_pairs
                );
            }
            if let Some(v) = block.mean_sim_real_iou_pct {
                println!(
                    "Sim-to-Real IoU: {} over {} pair(s)",
                    fmt_pct1(v),
                    block.interval_pairs
                );
            }
            if let (Some(sim), Some(real), Some(speedup)) =
                (block.sim_latency_s, block.real_latency_s, block.speedup)
            {
                println!("Latency: sim {sim:.3}s | real {real:.3}s | speedup {speedup:.2}x");
            }
            if !block.unpaired.is_empty() {
                println!("Unpaired scripts ({}):", block.unpaired.len());
                for u in &block.unpaired {
                    println!("  {u}");
                }
            }
        }
    }
    Ok(())
}
