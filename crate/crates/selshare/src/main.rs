use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use selshare::datasets::{write_digit_corpus, PlantedSpec, PLANTED_SPEC_VERSION};
use selshare::groupmgr::{read_arch_events, SharingCriterion};
use selshare::harness::{evaluate_checkpoint, read_trace, run_experiment, RunPaths, TrainConfig};
use selshare::{Error, Result};

#[derive(Parser)]
#[command(
    name = "selshare",
    version,
    about = "Multi-task training with gradient-driven branch merging"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a multi-task model, merging related task branches on the fly.
    Run {
        /// Path to a JSON training configuration.
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: $SELSHARE_OUT_DIR or ./run_out).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the sharing criterion:
        /// similarity|dissimilarity|variance|random|none.
        #[arg(long)]
        criterion: Option<String>,
    },
    /// Evaluate a saved checkpoint on one split of its own dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// train | val | test.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Summarize a run directory: merge history and parameter curve.
    InspectTrace {
        dir: PathBuf,
    },
    /// Generate datasets.
    GenData {
        #[command(subcommand)]
        what: GenCmd,
    },
}

#[derive(Subcommand)]
enum GenCmd {
    /// Procedural digit glyphs written as an IDX image/label file pair.
    Digits {
        /// Directory for <stem>-images-idx3-ubyte / <stem>-labels-idx1-ubyte.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "glyphs")]
        stem: String,
    },
    /// Planted-group regression spec JSON (consumed by run configs).
    Planted {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 512)]
        examples: usize,
        #[arg(long, default_value_t = 16)]
        input_dim: usize,
        /// Teacher hidden widths, comma separated.
        #[arg(long, default_value = "16,8")]
        hidden: String,
        /// Task groups: comma-separated ids, semicolon-separated groups.
        #[arg(long, default_value = "0,1,2;3,4,5")]
        groups: String,
        #[arg(long, default_value_t = 0.1)]
        sigma: f64,
        /// Per-task head perturbation around the group base head.
        #[arg(long, default_value_t = 0.3)]
        head_jitter: f64,
    },
}

fn parse_criterion(s: &str) -> Result<SharingCriterion> {
    match s.to_ascii_lowercase().as_str() {
        "similarity" => Ok(SharingCriterion::Similarity),
        "dissimilarity" => Ok(SharingCriterion::Dissimilarity),
        "variance" => Ok(SharingCriterion::Variance),
        "random" => Ok(SharingCriterion::Random),
        "none" => Ok(SharingCriterion::None),
        other => Err(Error::usage(format!(
            "unknown criterion '{other}' (expected similarity|dissimilarity|variance|random|none)"
        ))),
    }
}

fn default_out_dir() -> PathBuf {
    std::env::var_os("SELSHARE_OUT_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("run_out"))
}

fn parse_usize_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::usage(format!("'{p}' is not a number")))
        })
        .collect()
}

fn cmd_run(
    config_path: &Path,
    seed: Option<u64>,
    out: Option<PathBuf>,
    criterion: Option<String>,
) -> Result<()> {
    let mut config = TrainConfig::load(config_path)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    if let Some(name) = criterion {
        config.sharing.criterion = parse_criterion(&name)?;
    }
    config.validate()?;
    let out_dir = out.unwrap_or_else(default_out_dir);
    let result = run_experiment(&config, &out_dir)?;
    let s = &result.summary;
    println!("run complete: {}", out_dir.display());
    println!(
        "  best epoch {} (mean val score {:.6})",
        s.best_epoch, s.best_val_mean
    );
    println!("  mean test score {:.6}", s.test_mean);
    println!(
        "  final: {} params on {} branches{}",
        s.param_count_final,
        s.branch_count_final,
        match s.locked_at {
            Some(e) => format!(", locked at epoch {e}"),
            None => String::new(),
        }
    );
    Ok(())
}

fn cmd_eval(checkpoint: &Path, split: &str) -> Result<()> {
    let (metrics, mean, meta) = evaluate_checkpoint(checkpoint, split)?;
    println!("checkpoint: {}", checkpoint.display());
    println!("split: {split}");
    for (task, value) in &metrics {
        println!("  task {task}: {value:.9}");
    }
    println!("mean score: {mean:.9}");
    if let Some(recorded) = meta.get("val_metrics") {
        if split == "val" {
            let recorded: BTreeMap<usize, f64> = serde_json::from_value(recorded.clone())
                .map_err(|e| Error::ingest(format!("stored metrics unreadable: {e}")))?;
            let max_gap = metrics
                .iter()
                .map(|(t, v)| (v - recorded.get(t).copied().unwrap_or(f64::NAN)).abs())
                .fold(0.0f64, f64::max);
            println!("recorded-at-save max deviation: {max_gap:.3e}");
        }
    }
    Ok(())
}

fn cmd_inspect(dir: &Path) -> Result<()> {
    let paths = RunPaths::new(dir);
    let (header, epochs) = read_trace(&paths.trace())?;
    println!(
        "run of {} epochs, criterion {:?}, merge rule {:?}",
        epochs.len(),
        header.config.sharing.criterion,
        header.config.sharing.merge_rule
    );
    println!("epoch  params  branches  locked  val_mean");
    for e in &epochs {
        println!(
            "{:>5}  {:>6}  {:>8}  {:>6}  {:.6}",
            e.epoch,
            e.param_count,
            e.branch_count,
            if e.locked { "yes" } else { "no" },
            e.val_mean
        );
    }

    let events_path = paths.arch_events();
    if events_path.exists() {
        let events = read_arch_events(&events_path)?;
        println!("\nmerge history:");
        let mut any = false;
        for event in &events {
            for action in &event.plan.actions {
                any = true;
                println!(
                    "  epoch {}: tasks {:?} -> branch {} (clusters {:?}, score {:.6}, freed {} params)",
                    event.epoch,
                    action.tasks,
                    action.survivor,
                    action.clusters,
                    action.score,
                    event.param_count_before - event.param_count_after,
                );
            }
        }
        if !any {
            println!("  (no merges applied)");
        }
    } else {
        println!("\nno architecture events recorded");
    }

    let curve = dir.join("param_curve.csv");
    let mut csv = String::from("epoch,param_count,branch_count,locked\n");
    for e in &epochs {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            e.epoch, e.param_count, e.branch_count, e.locked as u8
        ));
    }
    std::fs::write(&curve, csv)?;
    println!("\nparameter curve written to {}", curve.display());
    Ok(())
}

fn cmd_gen(what: GenCmd) -> Result<()> {
    match what {
        GenCmd::Digits {
            out,
            count,
            seed,
            stem,
        } => {
            std::fs::create_dir_all(&out)?;
            write_digit_corpus(&out, &stem, count, seed)?;
            println!(
                "wrote {count} glyphs to {}/{stem}-{{images-idx3,labels-idx1}}-ubyte",
                out.display()
            );
        }
        GenCmd::Planted {
            out,
            examples,
            input_dim,
            hidden,
            groups,
            sigma,
            head_jitter,
        } => {
            let spec = PlantedSpec {
                format_version: PLANTED_SPEC_VERSION,
                num_examples: examples,
                input_dim,
                teacher_hidden: parse_usize_list(&hidden)?,
                groups: groups
                    .split(';')
                    .map(parse_usize_list)
                    .collect::<Result<_>>()?,
                head_jitter,
                noise_sigma: sigma,
            };
            spec.validate()?;
            spec.save(&out)?;
            println!("wrote planted spec to {}", out.display());
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Run {
            config,
            seed,
            out,
            criterion,
        } => cmd_run(&config, seed, out, criterion),
        Cmd::Eval { checkpoint, split } => cmd_eval(&checkpoint, &split),
        Cmd::InspectTrace { dir } => cmd_inspect(&dir),
        Cmd::GenData { what } => cmd_gen(what),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        eprintln!("run 'selshare --help' for usage");
        std::process::exit(1);
    }
}
