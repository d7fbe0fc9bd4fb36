use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use qoe_rca::pipeline::{gen_data, label_samples, run_stage, FeatureSpace, Layout, RunConfig, RunManifest, Stage};
use qoe_rca::{KpiSchema, RcaError, RuleSet};

#[derive(Parser)]
#[command(name = "qoe-rca", about = "Root-cause classification of degraded sessions from KPI time series")]
struct Cli {
    /// Output root for data, checkpoints and reports.
    #[arg(long, global = true, env = "QOE_RCA_OUT", default_value = "qoe-rca-out")]
    out: PathBuf,

    /// JSON run configuration; defaults to `<out>/config.json` when present.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic rule-labelled, expert-labelled and holdout pools.
    GenData {
        /// Shrink pool sizes by this factor in (0, 1].
        #[arg(long)]
        scale: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Label a samples file with the rule engine.
    Label {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Schema JSON; defaults to the generated one, else the built-in schema.
        #[arg(long)]
        schema: Option<PathBuf>,
        /// Ruleset JSON; defaults to the generated one, else the built-in rules.
        #[arg(long)]
        rules: Option<PathBuf>,
    },
    /// Run one stage or the whole pipeline.
    Run {
        #[arg(value_parser = ["diffusion", "pretrain", "finetune", "ablation", "evaluate", "all"])]
        stage: String,
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        diffusion_epochs: Option<usize>,
        #[arg(long)]
        pretrain_epochs: Option<usize>,
        #[arg(long)]
        finetune_epochs: Option<usize>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long, value_parser = ["raw", "embedding"])]
        feature_space: Option<String>,
    },
    /// Print the metrics of the last evaluation.
    Report,
}

fn exit_code(e: &RcaError) -> u8 {
    match e {
        RcaError::Config(_) => 2,
        RcaError::Dependency(_) => 3,
        e if e.is_numeric() => 4,
        _ => 1,
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, RcaError> {
    let path = match &cli.config {
        Some(p) => p.clone(),
        None => cli.out.join("config.json"),
    };
    if !path.exists() {
        if cli.config.is_some() {
            return Err(RcaError::Config(format!("config file {} not found", path.display())));
        }
        return Ok(RunConfig::default());
    }
    RunConfig::from_json(&fs::read_to_string(&path)?)
}

fn save_config(out: &Path, cfg: &RunConfig) -> Result<(), RcaError> {
    fs::create_dir_all(out)?;
    fs::write(out.join("config.json"), serde_json::to_string_pretty(cfg)? + "\n")?;
    Ok(())
}

fn or_default<T>(given: &Option<PathBuf>, generated: PathBuf, parse: impl Fn(&str) -> Result<T, RcaError>, fallback: T) -> Result<T, RcaError> {
    match given {
        Some(p) => parse(&fs::read_to_string(p)?),
        None if generated.exists() => parse(&fs::read_to_string(generated)?),
        None => Ok(fallback),
    }
}

fn print_report(path: &Path) -> Result<(), RcaError> {
    if !path.exists() {
        return Err(RcaError::Dependency(format!(
            "{} not found; run the `evaluate` stage first",
            path.display()
        )));
    }
    let v: serde_json::Value = serde_json::from_slice(&fs::read(path)?)?;
    let f = |v: &serde_json::Value| v.as_f64().map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into());
    println!("seeds {}", v["seeds"]);
    println!("test accuracy (mean ± std over seeds)");
    if let Some(acc) = v["accuracy"].as_object() {
        for (name, s) in acc {
            println!("  {name:<12} {} ± {}", f(&s["mean"]), f(&s["std"]));
        }
    }
    let space = v["separability"]["primary_space"].as_str().unwrap_or("raw").to_string();
    println!("separability ({space} space)");
    println!("  {:<16} {:>9} {:>9} {:>10} {:>9} {:>9}", "view", "icd", "sil", "ch", "db", "mi");
    if let Some(t) = v["separability"][&space].as_object() {
        for (name, r) in t {
            println!(
                "  {name:<16} {:>9} {:>9} {:>10} {:>9} {:>9}",
                f(&r["avg_interclass_distance"]),
                f(&r["silhouette"]),
                f(&r["calinski_harabasz"]),
                f(&r["davies_bouldin"]),
                f(&r["mutual_information_nats"])
            );
        }
    }
    let a = &v["l2_audit"];
    println!("reconstruction distance (mean)");
    for view in ["weak", "strong"] {
        println!(
            "  {view:<6} noise {} denoise {}",
            f(&a[format!("{view}_noise")]["mean"]),
            f(&a[format!("{view}_denoise")]["mean"])
        );
    }
    let r = &v["representation"];
    for stage in ["pretrain", "finetune"] {
        let m = &r[format!("{stage}_mean")];
        println!(
            "  embeddings after {stage:<8} sil {} ch {} db {}",
            f(&m["silhouette"]),
            f(&m["calinski_harabasz"]),
            f(&m["davies_bouldin"])
        );
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<(), RcaError> {
    let layout = Layout::new(&cli.out);
    match &cli.command {
        Command::GenData { scale, seed } => {
            let mut cfg = load_config(cli)?;
            if let Some(f) = scale {
                cfg.data = cfg.data.scaled(*f)?;
            }
            if let Some(s) = seed {
                cfg.data.seed = *s;
            }
            cfg.validate()?;
            let (summary, record) = gen_data(&cfg.data, &layout)?;
            save_config(&cli.out, &cfg)?;
            RunManifest::append(&layout, &cfg, vec![record])?;
            println!(
                "rule {} expert {} holdout {} (rule label noise {:.3})",
                summary.n_rule, summary.n_expert, summary.n_holdout, summary.rule_noise_rate
            );
            println!("rule class counts   {:?}", summary.rule_class_counts);
            println!("expert class counts {:?}", summary.expert_class_counts);
        }
        Command::Label {
            samples,
            output,
            schema,
            rules,
        } => {
            let data = layout.data_dir();
            let schema = or_default(schema, data.join("schema.json"), KpiSchema::from_json, KpiSchema::default_schema())?;
            let rules = or_default(rules, data.join("rules.json"), RuleSet::from_json, RuleSet::default_rules())?;
            let s = label_samples(samples, &schema, &rules, output)?;
            println!("labelled {} unlabelled {} class counts {:?}", s.labelled, s.unlabelled, s.class_counts);
        }
        Command::Run {
            stage,
            seeds,
            diffusion_epochs,
            pretrain_epochs,
            finetune_epochs,
            tau,
            feature_space,
        } => {
            let mut cfg = load_config(cli)?;
            if let Some(n) = seeds {
                cfg.seeds = *n;
            }
            if let Some(n) = diffusion_epochs {
                cfg.diffusion.epochs = *n;
            }
            if let Some(n) = pretrain_epochs {
                cfg.pretrain.epochs = *n;
            }
            if let Some(n) = finetune_epochs {
                cfg.finetune.epochs = *n;
            }
            if let Some(t) = tau {
                cfg.pretrain.tau = *t;
            }
            if let Some(s) = feature_space {
                cfg.evaluate.feature_space = if s == "raw" { FeatureSpace::Raw } else { FeatureSpace::Embedding };
            }
            let (_, manifest) = run_stage(Stage::parse(stage)?, &cfg, &layout)?;
            let n = manifest.stages.len();
            for r in &manifest.stages[n.saturating_sub(if stage == "all" { 5 } else { 1 })..] {
                println!("{:<10} {:>8.1}s", r.stage, r.wall_clock_secs);
            }
            if stage == "all" || stage == "evaluate" {
                print_report(&layout.metrics_json())?;
            }
        }
        Command::Report => print_report(&layout.metrics_json())?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
