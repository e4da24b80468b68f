//! `icl-lab`: train, evaluate and inspect in-context learners from the shell.

use std::collections::BTreeMap;
use std::error::Error;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use icl_core::dump::write_episodes;
use icl_core::evaluation::{
    emit_report, eval_mse_vs_context, report_csv, EvalReport, EvalSpec, ReportFormat,
};
use icl_core::models::{load_checkpoint, save_checkpoint, Arch};
use icl_core::ood::{OodKind, OodSpec};
use icl_core::training::{
    fingerprint_text, held_out_set, parse_pairs, train_with, CurriculumPreset, RunSeeds,
    TrainConfig,
};

type CliResult<T> = Result<T, Box<dyn Error>>;

#[derive(Parser, Debug)]
#[command(name = "icl-lab", version, about = "In-context learning lab")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Args, Debug)]
struct Global {
    /// Flat `key = value` config file layered over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed for every random stream of the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = "ICL_LAB_OUT", default_value = ".")]
    out: PathBuf,
    /// `linear`, `kernel` or `dynamics-<system>`.
    #[arg(long, global = true, default_value = "linear")]
    preset: String,
    #[arg(long, global = true)]
    arch: Option<String>,
    /// Worker threads; 1 gives bitwise-reproducible runs.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Config override, highest precedence. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE", value_parser = parse_override)]
    overrides: Vec<(String, String)>,
}

#[derive(Subcommand, Debug)]
enum Verb {
    /// Train a model and write `model.ckpt`, `train_log.csv` and `config.txt`.
    Train,
    /// Evaluate a checkpoint and the baselines against context length.
    Eval {
        /// Defaults to `<out>/model.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        grid: Grid,
    },
    /// Baseline-only report.
    Baselines {
        /// Shorthand for `--preset`; accepts family names.
        #[arg(long)]
        family: Option<String>,
        #[command(flatten)]
        grid: Grid,
    },
    /// Write held-out episodes as JSON lines.
    DumpEpisodes {
        #[arg(long)]
        family: Option<String>,
        #[arg(long)]
        d: Option<usize>,
        /// Context length.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long)]
        ood: Option<String>,
    },
    /// Print the curriculum table of a preset.
    Schedule,
}

#[derive(Args, Debug)]
struct Grid {
    #[arg(long)]
    d: Option<usize>,
    /// Context lengths: `1..41` (inclusive), `5`, or `1,5,10`.
    #[arg(long, value_parser = parse_k_values)]
    k: Option<KValues>,
    #[arg(long, default_value_t = 500)]
    episodes: usize,
    /// Out-of-distribution evaluation, e.g. `orthogonal` or `scaled`.
    #[arg(long)]
    ood: Option<String>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Csv,
    Json,
}

impl Format {
    fn ext(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }

    fn report(self) -> ReportFormat {
        match self {
            Format::Csv => ReportFormat::Csv,
            Format::Json => ReportFormat::Json,
        }
    }
}

fn parse_override(s: &str) -> Result<(String, String), String> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| format!("expected KEY=VALUE, got `{s}`"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

#[derive(Clone, Debug)]
struct KValues(Vec<usize>);

fn parse_k_values(s: &str) -> Result<KValues, String> {
    let num = |t: &str| {
        t.trim()
            .parse::<usize>()
            .map_err(|_| format!("bad context length `{t}`"))
    };
    let ks: Vec<usize> = if let Some((a, b)) = s.split_once("..") {
        let (a, b) = (num(a)?, num(b.trim_start_matches('='))?);
        (a..=b).collect()
    } else {
        s.split(',').map(num).collect::<Result<_, _>>()?
    };
    if ks.is_empty() || ks.contains(&0) {
        return Err(format!("`{s}` gives no positive context lengths"));
    }
    Ok(KValues(ks))
}

/// Files written by the current command, removed again if it fails.
#[derive(Default)]
struct Outputs {
    files: Vec<PathBuf>,
    created_dir: Option<PathBuf>,
}

impl Outputs {
    fn dir(&mut self, dir: &Path) -> CliResult<()> {
        if !dir.exists() {
            fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
            self.created_dir = Some(dir.to_path_buf());
        }
        Ok(())
    }

    fn claim(&mut self, path: PathBuf) -> PathBuf {
        self.files.push(path.clone());
        path
    }

    fn discard(&self) {
        for f in &self.files {
            let _ = fs::remove_file(f);
        }
        if let Some(d) = &self.created_dir {
            // Only succeeds when empty, which is what we want.
            let _ = fs::remove_dir(d);
        }
    }
}

fn preset_name(s: &str) -> &str {
    match s {
        "gaussian_kernel" => "kernel",
        other => other,
    }
}

/// Preset, then config file, then `--arch`/`--seed`, then `--set`.
fn effective_config(g: &Global, preset: &str) -> CliResult<TrainConfig> {
    let arch: Arch = g.arch.as_deref().unwrap_or("transformer").parse()?;
    let mut base = TrainConfig::named(preset_name(preset), arch)?;
    let mut overrides: Vec<(String, String)> = Vec::new();
    if let Some(path) = &g.config {
        let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let file = parse_pairs(&text)?;
        if file.contains_key("family") {
            // A different family carries different keys, so start from its
            // own defaults instead of the preset's.
            let head: BTreeMap<_, _> = file
                .iter()
                .filter(|(k, _)| matches!(k.as_str(), "family" | "dynamics_kind" | "arch"))
                .collect();
            let text: String = head.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
            base = TrainConfig::from_text(&text)?;
        }
        overrides.extend(file);
    }
    if let Some(a) = &g.arch {
        overrides.push(("arch".into(), a.clone()));
    }
    if let Some(s) = g.seed {
        overrides.push(("seed".into(), s.to_string()));
    }
    overrides.extend(g.overrides.iter().cloned());
    Ok(base.with_overrides(&overrides)?)
}

fn announce(cfg: &TrainConfig) {
    println!("# effective config, fingerprint {}", cfg.fingerprint());
    print!("{cfg}");
    println!();
}

fn spec_for(cfg: &TrainConfig, grid: &Grid, default_ks: Vec<usize>) -> CliResult<EvalSpec> {
    let mut task = cfg.task.clone();
    if let Some(name) = &grid.ood {
        let kind: OodKind = name.parse()?;
        task.input = task.input.clone().with_ood(OodSpec::new(kind));
    }
    Ok(EvalSpec {
        task,
        d: grid.d.unwrap_or(cfg.dim),
        k_values: grid.k.clone().map_or(default_ks, |k| k.0),
        n_episodes: grid.episodes,
        base_seed: RunSeeds::new(cfg.seed).test,
    })
}

fn print_report(report: &EvalReport) {
    print!("{}", report_csv(report));
}

fn run(cli: Cli, out: &mut Outputs) -> CliResult<()> {
    let g = &cli.global;
    match &cli.verb {
        Verb::Train => {
            let cfg = effective_config(g, &g.preset)?;
            announce(&cfg);
            out.dir(&g.out)?;
            let outcome = train_with(&cfg, |row| {
                if let Some(v) = row.val_mse {
                    println!(
                        "step {:>6}  loss {:.5}  val {:.5}  (d {}, k {})",
                        row.step, row.loss, v, row.dim, row.prompt_len
                    );
                }
            })?;
            let text = cfg.to_text();
            fs::write(out.claim(g.out.join("config.txt")), &text)?;
            outcome
                .log
                .write_csv(&out.claim(g.out.join("train_log.csv")))?;
            save_checkpoint(&out.claim(g.out.join("model.ckpt")), &outcome.model, &text)?;
            if let (Some(step), Some(v)) = (outcome.log.best_step, outcome.log.best_val_mse) {
                println!("kept step {step} (val {v:.5})");
            }
            println!("wrote {}", g.out.display());
        }
        Verb::Eval { checkpoint, grid } => {
            let path = checkpoint
                .clone()
                .unwrap_or_else(|| g.out.join("model.ckpt"));
            if !path.is_file() {
                return Err(format!("checkpoint {} not found", path.display()).into());
            }
            let (model, meta) = load_checkpoint(&path)?;
            let mut cfg = TrainConfig::from_text(&meta)?;
            let mut overrides = Vec::new();
            if let Some(s) = g.seed {
                overrides.push(("seed".into(), s.to_string()));
            }
            overrides.extend(g.overrides.iter().cloned());
            cfg = cfg.with_overrides(&overrides)?;
            announce(&cfg);
            let spec = spec_for(&cfg, grid, (1..=cfg.k).collect())?;
            let report = eval_mse_vs_context(Some(&model), &spec, Some(fingerprint_text(&meta)))?;
            out.dir(&g.out)?;
            let file = out.claim(g.out.join(format!("eval.{}", grid.format.ext())));
            emit_report(&report, &file, grid.format.report())?;
            print_report(&report);
            println!("wrote {}", file.display());
        }
        Verb::Baselines { family, grid } => {
            let cfg = effective_config(g, family.as_deref().unwrap_or(&g.preset))?;
            announce(&cfg);
            let spec = spec_for(&cfg, grid, (1..=cfg.k).collect())?;
            let report = eval_mse_vs_context(None, &spec, None)?;
            out.dir(&g.out)?;
            let file = out.claim(g.out.join(format!("baselines.{}", grid.format.ext())));
            emit_report(&report, &file, grid.format.report())?;
            print_report(&report);
            println!("wrote {}", file.display());
        }
        Verb::DumpEpisodes {
            family,
            d,
            k,
            episodes,
            ood,
        } => {
            let cfg = effective_config(g, family.as_deref().unwrap_or(&g.preset))?;
            announce(&cfg);
            let grid = Grid {
                d: *d,
                k: Some(KValues(vec![k.unwrap_or(cfg.k)])),
                episodes: *episodes,
                ood: ood.clone(),
                format: Format::Json,
            };
            let spec = spec_for(&cfg, &grid, Vec::new())?;
            let prompts = held_out_set(
                &spec.task,
                spec.d,
                spec.k_values[0],
                spec.base_seed,
                spec.n_episodes,
            )?;
            out.dir(&g.out)?;
            let file = out.claim(g.out.join("episodes.jsonl"));
            write_episodes(&file, &prompts)?;
            println!("wrote {} episodes to {}", prompts.len(), file.display());
        }
        Verb::Schedule => {
            let curriculum = match preset_name(&g.preset) {
                "kernel" => CurriculumPreset::Kernel,
                "dynamics" => CurriculumPreset::Dynamics,
                _ => effective_config(g, &g.preset)?.curriculum,
            };
            let schedule = curriculum
                .schedule()
                .ok_or("this configuration trains without a curriculum")?;
            let mut w = std::io::stdout().lock();
            writeln!(w, "step,dim,len")?;
            for (step, dim, len) in schedule.table() {
                writeln!(w, "{step},{dim},{len}")?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.global.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    let mut out = Outputs::default();
    match run(cli, &mut out) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            out.discard();
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
