//! Command line front end. All logic lives in the library; this binary
//! parses arguments, wires files together, and maps errors to exit codes:
//! 0 success, 2 invalid configuration, 3 non-finite abort, 1 anything else.

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use tgrl::analysis::{ablation_matrix, gradcheck, AblationSpec};
use tgrl::config::{apply_overrides, preset, ExperimentConfig};
use tgrl::env::{generate_instance, ExpertSpec};
use tgrl::error::Error;
use tgrl::objective::Variant;
use tgrl::policy::PolicyParams;
use tgrl::rollout::{sample_group, DumpRecord, Expert};
use tgrl::trainer::{eval_instances, evaluate, train};

#[derive(Parser)]
#[command(name = "tgrl", about = "Verifiable-reward RL laboratory on synthetic two-stage tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Built-in preset name ('standard' or 'needle').
    #[arg(long, default_value = "standard", conflicts_with = "config")]
    preset: String,
    /// TOML config file (overrides --preset).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path override, e.g. --set train.lr=0.01 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> tgrl::Result<ExperimentConfig> {
        let base = match &self.config {
            Some(path) => tgrl::config::load(path)?,
            None => preset(&self.preset)?,
        };
        let mut cfg = apply_overrides(&base, &self.set)?;
        cfg.resolve()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one policy per configured seed and write metrics, the
    /// resolved config, and a checkpoint per run.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output root; defaults to $TGRL_OUT_ROOT or ./runs.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Greedy-evaluate a checkpoint on a fresh held-out instance set.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of evaluation instances.
        #[arg(long, default_value_t = 500)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare analytic gradients against finite differences for every
    /// objective variant and architecture.
    Gradcheck {
        /// Variant to check, or 'all'.
        #[arg(long, default_value = "all")]
        variant: String,
        /// Architecture to check ('tabular', 'mlp', or 'all').
        #[arg(long, default_value = "all")]
        arch: String,
        #[arg(long, default_value_t = 50)]
        groups: usize,
        /// Coordinates probed per group.
        #[arg(long, default_value_t = 20)]
        coords: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Maximum allowed relative error.
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
    },
    /// Run the standard ablation grid (baseline, full method, no-filter,
    /// no-reweight, no-experts) over the configured seeds.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample rollout groups and print them as JSONL records.
    DumpTrajectories {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Number of groups to dump.
        #[arg(long, default_value_t = 4)]
        groups: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Score trajectories under this checkpoint instead of a fresh
        /// initialization.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn out_root(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os("TGRL_OUT_ROOT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn parse_variants(s: &str) -> tgrl::Result<Vec<Variant>> {
    if s == "all" {
        return Ok(Variant::all().to_vec());
    }
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map(|v| vec![v])
        .map_err(|_| Error::Config(format!("unknown variant '{s}'")))
}

fn run_train(cfg: ExperimentConfig, out: Option<PathBuf>) -> tgrl::Result<()> {
    let root = out_root(out).join(&cfg.name);
    for &seed in &cfg.seeds {
        let dir = root.join(format!("seed-{seed}"));
        std::fs::create_dir_all(&dir)?;
        let mut resolved = cfg.clone();
        resolved.train.seed = seed;
        tgrl::config::save(&resolved, &dir.join("resolved.toml"))?;

        let policy = PolicyParams::init(
            cfg.arch.clone(),
            cfg.env.vocab(),
            cfg.env.context_window,
            seed,
        )?;
        let metrics_path = dir.join("metrics.jsonl");
        let mut metrics_file = std::io::BufWriter::new(std::fs::File::create(&metrics_path)?);
        let mut tc = cfg.train.clone();
        tc.seed = seed;
        let result = train(policy, &cfg.env, &cfg.objective, &tc, |line| {
            let _ = serde_json::to_writer(&mut metrics_file, line);
            let _ = metrics_file.write_all(b"\n");
        });
        metrics_file.flush()?;
        match result {
            Ok(out) => {
                out.policy.save(&dir.join("checkpoint.json"))?;
                let summary = serde_json::json!({
                    "seed": seed,
                    "final_eval": out.final_eval,
                    "skipped_steps": out.skipped_steps,
                    "steps": out.history.len(),
                });
                std::fs::write(dir.join("summary.json"), summary.to_string())?;
                println!("seed {seed}: final_eval {:.4} ({} skipped steps)", out.final_eval, out.skipped_steps);
            }
            Err(Error::NonFinite { step, what, dump }) => {
                std::fs::write(dir.join("nonfinite-dump.json"), &dump)?;
                return Err(Error::NonFinite { step, what, dump });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(())
}

fn run(cli: Cli) -> tgrl::Result<()> {
    match cli.command {
        Command::Train { cfg, out } => run_train(cfg.load()?, out),
        Command::Eval { cfg, checkpoint, instances, seed } => {
            let cfg = cfg.load()?;
            let policy = PolicyParams::load(&checkpoint)?;
            if policy.vocab != cfg.env.vocab() {
                return Err(Error::Config(
                    "checkpoint vocabulary does not match env (wrong config for this checkpoint?)"
                        .into(),
                ));
            }
            let set = eval_instances(&cfg.env, instances, seed)?;
            let acc = evaluate(&policy, &set, &cfg.env);
            println!(
                "{}",
                serde_json::json!({ "instances": instances, "accuracy": acc })
            );
            Ok(())
        }
        Command::Gradcheck { variant, arch, groups, coords, seed, tol } => {
            let variants = parse_variants(&variant)?;
            let archs: Vec<&str> = match arch.as_str() {
                "all" => vec!["tabular", "mlp"],
                "tabular" => vec!["tabular"],
                "mlp" => vec!["mlp"],
                other => return Err(Error::Config(format!("unknown arch '{other}'"))),
            };
            let mut worst: f64 = 0.0;
            for v in &variants {
                for a in &archs {
                    let r = gradcheck(*v, a, groups, coords, seed)?;
                    let status = if r.max_rel_err <= tol { "ok" } else { "FAIL" };
                    println!(
                        "{:<12} {:<8} groups={} coords={} max_rel_err={:.3e} {}",
                        r.variant.to_string(),
                        r.arch,
                        r.groups_checked,
                        r.coords_checked,
                        r.max_rel_err,
                        status
                    );
                    worst = worst.max(r.max_rel_err);
                }
            }
            if worst > tol {
                return Err(Error::Contract(format!(
                    "gradient check failed: max relative error {worst:.3e} > {tol:.1e}"
                )));
            }
            Ok(())
        }
        Command::Ablate { cfg, out } => {
            let cfg = cfg.load()?;
            let base_variant = cfg.objective.variant;
            let (tgrl_variant, baseline) = if base_variant.is_dapo_family() {
                (Variant::TgrlDapo, Variant::Dapo)
            } else {
                (Variant::TgrlGrpo, Variant::Grpo)
            };
            let specs = vec![
                AblationSpec {
                    label: baseline.to_string(),
                    variant: baseline,
                    n_off: 0,
                    ..AblationSpec::of(baseline)
                },
                AblationSpec::of(tgrl_variant),
                AblationSpec {
                    label: format!("{tgrl_variant}-no-filter"),
                    filtering: false,
                    ..AblationSpec::of(tgrl_variant)
                },
                AblationSpec {
                    label: format!("{tgrl_variant}-no-reweight"),
                    reweighting: false,
                    ..AblationSpec::of(tgrl_variant)
                },
                AblationSpec {
                    label: format!("{tgrl_variant}-no-experts"),
                    n_off: 0,
                    ..AblationSpec::of(tgrl_variant)
                },
            ];
            let results = ablation_matrix(&cfg.env, &cfg.arch, &cfg.train, &specs, &cfg.seeds)?;
            for r in &results {
                println!("{:<24} seed {:<4} final_eval {:.4}", r.label, r.seed, r.final_eval);
            }
            let root = out_root(out).join(&cfg.name);
            std::fs::create_dir_all(&root)?;
            std::fs::write(
                root.join("ablation.json"),
                serde_json::to_string_pretty(&results)?,
            )?;
            Ok(())
        }
        Command::DumpTrajectories { cfg, groups, seed, checkpoint, out } => {
            let cfg = cfg.load()?;
            let snapshot = match checkpoint {
                Some(p) => PolicyParams::load(&p)?,
                None => PolicyParams::init(
                    cfg.arch.clone(),
                    cfg.env.vocab(),
                    cfg.env.context_window,
                    seed,
                )?,
            };
            let expert = Expert::from_spec(ExpertSpec::new(cfg.train.expert_error_rate)?, &cfg.env);
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut lines = Vec::new();
            for _ in 0..groups {
                let inst = generate_instance(&mut rng, &cfg.env)?;
                let group = sample_group(
                    &snapshot,
                    &expert,
                    &inst,
                    cfg.train.n_on,
                    cfg.train.n_off,
                    &cfg.env,
                    cfg.train.expert_cache_pool,
                    &mut rng,
                )?;
                for rec in DumpRecord::from_group(&group, Some(&snapshot)) {
                    lines.push(serde_json::to_string(&rec)?);
                }
            }
            let text = lines.join("\n") + "\n";
            match out {
                Some(path) => std::fs::write(path, text)?,
                None => print!("{text}"),
            }
            Ok(())
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        let code = match e {
            Error::Config(_) | Error::Parse(_) | Error::Input(_) => 2,
            Error::NonFinite { .. } => 3,
            _ => 1,
        };
        std::process::exit(code);
    }
}
