use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cotkit::causal::{oracle_row, random_tree_measure, write_oracle_csv};
use cotkit::config::{hash_pairs, DATASET_REQUIRED, TRAIN_REQUIRED};
use cotkit::experiment::{write_rows_csv, write_summary_csv};
use cotkit::training::{
    train_with, write_checkpoint_with_manifest, write_metrics_header, write_metrics_row, RunHeader,
};
use cotkit::{
    convergence_experiment, evaluate_predictor, generate_dataset, sinkhorn_solve, ConfigSource, ConvergenceConfig,
    Error, Kernel, ModelBundle, Result, RunConfig, SinkhornConfig,
};

#[derive(Parser)]
#[command(name = "cotkit", version, about = "Causal optimal transport toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    total_steps: Option<u64>,
    #[arg(long)]
    context_length: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a synthetic dataset (`.cotk` extension selects the binary format).
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Number of paths; defaults to `n_train`.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a generator; writes metrics, checkpoints and an evaluation report.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Evaluate a checkpoint on freshly drawn held-out paths.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Raw versus smoothed adapted Wasserstein estimates on the degenerate-reveal law.
    Converge {
        #[arg(long, value_delimiter = ',', default_value = "4,8,16")]
        m_grid: Vec<usize>,
        /// Number of seeds, starting at `seed_base`.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value_t = 0)]
        seed_base: u64,
        #[arg(long, default_value_t = 0.5)]
        beta: f64,
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        #[arg(long, default_value = "gaussian")]
        kernel: String,
        #[arg(long, default_value_t = 1)]
        samples_per_atom: usize,
        #[arg(long)]
        grid_size: Option<usize>,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long)]
        out: PathBuf,
        /// Per-configuration means and standard errors.
        #[arg(long)]
        summary_out: Option<PathBuf>,
    },
    /// Exact transport values on random tiny instances, optionally against Sinkhorn.
    Oracle {
        #[arg(long, default_value_t = 50)]
        instances: usize,
        #[arg(long, default_value_t = 4)]
        atoms: usize,
        #[arg(long, default_value_t = 2)]
        steps: usize,
        #[arg(long, default_value_t = 1)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.01)]
        epsilon: f64,
        #[arg(long, default_value_t = 5000)]
        iterations: usize,
        #[arg(long)]
        out: PathBuf,
        /// Writes `instance_id,w,sinkhorn_cost,abs_diff`.
        #[arg(long)]
        sinkhorn_out: Option<PathBuf>,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config { .. } | Error::MissingKey(_) | Error::InvalidArgument(_) | Error::Dimension { .. } => 2,
        Error::NumericalFailure { .. } | Error::NonFinite { .. } | Error::TrainingAborted { .. } | Error::Domain(_) => 3,
        Error::Io(_) | Error::Csv(_) | Error::Json(_) | Error::Format(_) => 4,
    }
}

fn load_config(args: &ConfigArgs, required: &[&str]) -> Result<RunConfig> {
    let mut src = match &args.config {
        Some(path) => ConfigSource::from_file(path)?,
        None => ConfigSource::default(),
    };
    for s in &args.set {
        src.apply_override(s)?;
    }
    if let Some(seed) = args.seed {
        src.apply_override(&format!("seed={seed}"))?;
    }
    if let Some(n) = args.total_steps {
        src.apply_override(&format!("total_steps={n}"))?;
    }
    if let Some(k) = args.context_length {
        src.apply_override(&format!("context_length={k}"))?;
    }
    RunConfig::from_source(&src, required)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn provenance(hash: &str, seed: u64) -> Vec<(&'static str, String)> {
    vec![("config_hash", hash.to_string()), ("seed", seed.to_string())]
}

fn generate(args: &ConfigArgs, n: Option<usize>, out: &Path) -> Result<()> {
    let cfg = load_config(args, &DATASET_REQUIRED)?;
    let mut spec = cfg.train_dataset();
    if let Some(n) = n {
        spec.n = n;
    }
    let batch = generate_dataset(&spec)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    cotkit::io::save_batch(&batch, &provenance(&cfg.hash(), cfg.dataset.seed), out)?;
    println!("wrote {} paths to {}", batch.len(), out.display());
    Ok(())
}

fn write_eval(report: &cotkit::EvalReport, out: &Path) -> Result<()> {
    let mut f = create(out)?;
    writeln!(f, "{}", report.to_json()?)?;
    f.flush()?;
    Ok(())
}

fn train_command(args: &ConfigArgs, out_dir: &Path) -> Result<()> {
    let cfg = load_config(args, &TRAIN_REQUIRED)?;
    let hash = cfg.hash();
    let seed = cfg.dataset.seed;
    std::fs::create_dir_all(out_dir)?;
    let data = generate_dataset(&cfg.train_dataset())?;
    let mut metrics = create(&out_dir.join("metrics.csv"))?;
    write_metrics_header(
        &mut metrics,
        &RunHeader {
            config_hash: hash.clone(),
            seed,
            optimizer: cfg.train.optimizer,
        },
    )?;
    let ckpt_dir = out_dir.join("checkpoints");
    let result = train_with(&data, &cfg.train, |state, row| {
        write_metrics_row(&mut metrics, row)?;
        if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 {
            write_checkpoint_with_manifest(&ckpt_dir, &state.model, state.step, &hash, seed)?;
        }
        Ok(())
    });
    metrics.flush()?;
    let state = result?;
    if cfg.checkpoint_every == 0 || state.step % cfg.checkpoint_every != 0 || state.step == 0 {
        write_checkpoint_with_manifest(&ckpt_dir, &state.model, state.step, &hash, seed)?;
    }
    state.model.save(&out_dir.join("model.cotp"))?;

    let held = generate_dataset(&cfg.eval_dataset())?;
    let report = evaluate_predictor(&state.model.generator, &held, &cfg.dataset, &cfg.eval_config())?;
    write_eval(&report, &out_dir.join("eval.json"))?;
    println!("trained {} steps; artifacts in {}", state.step, out_dir.display());
    Ok(())
}

fn eval_command(args: &ConfigArgs, checkpoint: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(args, &["dataset_kind", "seq_len", "context_length", "seed"])?;
    let model = ModelBundle::load(checkpoint)?;
    if model.generator.shape().dim != cfg.dataset.dim {
        return Err(Error::Dimension {
            expected: format!("checkpoint for {}-dimensional data", cfg.dataset.dim),
            found: model.generator.shape().dim.to_string(),
        });
    }
    let held = generate_dataset(&cfg.eval_dataset())?;
    let report = evaluate_predictor(&model.generator, &held, &cfg.dataset, &cfg.eval_config())?;
    write_eval(&report, out)?;
    println!("wrote evaluation to {}", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn converge_command(
    m_grid: Vec<usize>,
    seeds: u64,
    seed_base: u64,
    beta: f64,
    scale: f64,
    kernel: &str,
    samples_per_atom: usize,
    grid_size: Option<usize>,
    threads: usize,
    out: &Path,
    summary_out: Option<&Path>,
) -> Result<()> {
    let kernel: Kernel = kernel.parse()?;
    let grid: Vec<String> = m_grid.iter().map(|m| m.to_string()).collect();
    let hash = hash_pairs(&[
        ("m_grid", grid.join(",")),
        ("seeds", seeds.to_string()),
        ("seed_base", seed_base.to_string()),
        ("beta", beta.to_string()),
        ("scale", scale.to_string()),
        ("kernel", kernel.as_str().to_string()),
        ("samples_per_atom", samples_per_atom.to_string()),
        ("grid_size", grid_size.map(|g| g.to_string()).unwrap_or_default()),
    ]);
    let cfg = ConvergenceConfig {
        m_grid,
        seeds: (seed_base..seed_base + seeds).collect(),
        bandwidth_c: scale,
        bandwidth_beta: beta,
        kernel,
        samples_per_atom,
        grid_size,
        threads,
        config_hash: hash.clone(),
        ..ConvergenceConfig::default()
    };
    let report = convergence_experiment(&cfg)?;
    let mut f = create(out)?;
    writeln!(f, "# config_hash={hash}")?;
    writeln!(f, "# seed_base={seed_base}")?;
    write_rows_csv(&report, &mut f)?;
    if let Some(path) = summary_out {
        let mut f = create(path)?;
        writeln!(f, "# config_hash={hash}")?;
        writeln!(f, "# seed_base={seed_base}")?;
        write_summary_csv(&report, &mut f)?;
    }
    println!("wrote {} rows to {}", report.rows.len(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn oracle_command(
    instances: usize,
    atoms: usize,
    steps: usize,
    dim: usize,
    seed: u64,
    epsilon: f64,
    iterations: usize,
    out: &Path,
    sinkhorn_out: Option<&Path>,
) -> Result<()> {
    if atoms == 0 || atoms > cotkit::causal::MAX_ATOMS_CAUSAL || steps == 0 || steps > cotkit::causal::MAX_STEPS_CAUSAL || dim == 0
    {
        return Err(Error::InvalidArgument(format!(
            "oracle instances need 1..={} atoms and 1..={} steps",
            cotkit::causal::MAX_ATOMS_CAUSAL,
            cotkit::causal::MAX_STEPS_CAUSAL
        )));
    }
    let sk = SinkhornConfig::new(epsilon, iterations)?;
    let hash = hash_pairs(&[
        ("instances", instances.to_string()),
        ("atoms", atoms.to_string()),
        ("steps", steps.to_string()),
        ("dim", dim.to_string()),
        ("seed", seed.to_string()),
        ("epsilon", epsilon.to_string()),
        ("iterations", iterations.to_string()),
    ]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(instances);
    let mut comparisons = Vec::with_capacity(instances);
    for id in 0..instances {
        let mu = random_tree_measure(&mut rng, atoms, steps, dim);
        let nu = random_tree_measure(&mut rng, atoms, steps, dim);
        let row = oracle_row(id, &mu, &nu)?;
        if sinkhorn_out.is_some() {
            let cost = cotkit::path::cost_matrix(mu.atoms(), nu.atoms())?;
            let s = sinkhorn_solve(&mu, &nu, &cost, &sk)?;
            comparisons.push((id, row.w, s.transport_cost));
        }
        rows.push(row);
    }
    let mut f = create(out)?;
    for (k, v) in provenance(&hash, seed) {
        writeln!(f, "# {k}={v}")?;
    }
    write_oracle_csv(&rows, &mut f)?;
    if let Some(path) = sinkhorn_out {
        let mut f = create(path)?;
        for (k, v) in provenance(&hash, seed) {
            writeln!(f, "# {k}={v}")?;
        }
        writeln!(f, "# epsilon={epsilon}")?;
        writeln!(f, "instance_id,w,sinkhorn_cost,abs_diff")?;
        for (id, w, s) in comparisons {
            writeln!(f, "{id},{w},{s},{}", (w - s).abs())?;
        }
        f.flush()?;
    }
    println!("wrote {} instances to {}", rows.len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { cfg, n, out } => generate(&cfg, n, &out),
        Command::Train { cfg, out_dir } => train_command(&cfg, &out_dir),
        Command::Eval { cfg, checkpoint, out } => eval_command(&cfg, &checkpoint, &out),
        Command::Converge {
            m_grid,
            seeds,
            seed_base,
            beta,
            scale,
            kernel,
            samples_per_atom,
            grid_size,
            threads,
            out,
            summary_out,
        } => converge_command(
            m_grid,
            seeds,
            seed_base,
            beta,
            scale,
            &kernel,
            samples_per_atom,
            grid_size,
            threads,
            &out,
            summary_out.as_deref(),
        ),
        Command::Oracle {
            instances,
            atoms,
            steps,
            dim,
            seed,
            epsilon,
            iterations,
            out,
            sinkhorn_out,
        } => oracle_command(instances, atoms, steps, dim, seed, epsilon, iterations, &out, sinkhorn_out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
