//! Command-line front end. Output paths, and relative `--checkpoint` or
//! `--data` paths, are resolved against `--out-dir`.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::analysis::{export_coefficients, export_kernel_magnitude, to_pgm};
use crate::config::ExperimentConfig;
use crate::data::{generate_dataset, stack_samples, DomainSample};
use crate::error::{Error, Result};
use crate::io::{load_dataset, save_dataset};
use crate::train::{ablation_suite, evaluate, load_checkpoint, run_seed, save_checkpoint, ExperimentReport, Split};

#[derive(Debug, Parser)]
#[command(name = "ddg", version, about = "Dynamic-kernel domain generalization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replace the configured seed list with this single seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    #[arg(long)]
    target_domain: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the synthetic dataset to a directory.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train every seed and write run records and checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint (single seed only).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Accuracy of a checkpoint on the held-out domain.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory written by gen-data; regenerated when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// All variants with and without mixing; writes ablation.csv.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Kernel magnitude maps of the middle convolutions.
    ExportKmm {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of held-out images used as probe for dynamic kernels.
        #[arg(long, default_value_t = 32)]
        probe_count: usize,
        /// Ignore the probe even for dynamic checkpoints.
        #[arg(long)]
        no_probe: bool,
    },
    /// Adjuster coefficients for every sample of the dataset.
    ExportCoeffs {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated block indices; all dynamic blocks when omitted.
        #[arg(long, value_delimiter = ',')]
        blocks: Vec<usize>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            c.seeds = vec![s];
        }
        if let Some(t) = self.target_domain {
            c.target_domain = t;
        }
        c.validate()?;
        Ok(c)
    }

    fn out(&self, name: impl AsRef<Path>) -> PathBuf {
        self.out_dir.join(name)
    }

    fn ensure_out_dir(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out_dir).map_err(|e| Error::io(&self.out_dir, e))
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn dataset(common: &Common, config: &ExperimentConfig, data: Option<&PathBuf>) -> Result<Vec<DomainSample>> {
    match data {
        Some(dir) => Ok(load_dataset(&common.out(dir))?.1),
        None => generate_dataset(&config.dataset),
    }
}

fn run(command: Command, out: &mut dyn Write) -> Result<()> {
    let mut emit = |line: String| writeln!(out, "{line}").map_err(|e| Error::io("<stdout>", e));
    match command {
        Command::GenData { common } => {
            let config = common.config()?;
            let samples = generate_dataset(&config.dataset)?;
            let dir = common.out("dataset");
            save_dataset(&dir, &config.dataset, &samples)?;
            emit(format!("dataset={}\nsamples={}", dir.display(), samples.len()))?;
        }
        Command::Train { common, resume } => {
            let config = common.config()?;
            common.ensure_out_dir()?;
            let samples = generate_dataset(&config.dataset)?;
            let split = Split::new(&samples, config.target_domain, config.training.validation_fraction)?;
            let resume = match resume {
                Some(p) if config.seeds.len() == 1 => Some(load_checkpoint(&common.out(p))?),
                Some(_) => return Err(Error::Usage("--resume needs exactly one seed".into())),
                None => None,
            };
            let mut resume = resume;
            let mut records = Vec::new();
            for &seed in &config.seeds {
                let ckpt = common.out(format!("checkpoint_seed{seed}.ddgt"));
                let (record, _) = run_seed(&config, &split, seed, resume.take(), |s| save_checkpoint(&ckpt, s))?;
                let path = common.out(format!("run_seed{seed}.txt"));
                write_file(&path, record.to_text())?;
                emit(format!(
                    "seed={seed} target_accuracy={} record={} checkpoint={}",
                    record.target_accuracy,
                    path.display(),
                    ckpt.display()
                ))?;
                records.push(record);
            }
            let report = ExperimentReport::new(records)?;
            write_file(&common.out("summary.txt"), report.summary_text())?;
            emit(report.summary_text().trim_end().to_string())?;
        }
        Command::Eval {
            common,
            checkpoint,
            data,
        } => {
            let config = common.config()?;
            let mut state = load_checkpoint(&common.out(checkpoint))?;
            let samples = dataset(&common, &config, data.as_ref())?;
            let split = Split::new(&samples, config.target_domain, 0.0)?;
            let acc = evaluate(&mut state.network, &split.target, config.training.eval_batch_size)?;
            emit(format!(
                "target_domain={}\nsamples={}\naccuracy={acc}",
                config.target_domain,
                split.target.len()
            ))?;
        }
        Command::Ablate { common } => {
            let config = common.config()?;
            common.ensure_out_dir()?;
            let table = ablation_suite(&config)?;
            let path = common.out("ablation.csv");
            write_file(&path, table.to_csv())?;
            write_file(&common.out("ablation_summary.csv"), table.summary_text()?)?;
            emit(format!("table={}\nrows={}", path.display(), table.rows.len()))?;
        }
        Command::ExportKmm {
            common,
            checkpoint,
            probe_count,
            no_probe,
        } => {
            let config = common.config()?;
            common.ensure_out_dir()?;
            let mut state = load_checkpoint(&common.out(checkpoint))?;
            let probe = if no_probe {
                None
            } else {
                let samples = generate_dataset(&config.dataset)?;
                let split = Split::new(&samples, config.target_domain, 0.0)?;
                let n = probe_count.clamp(1, split.target.len());
                Some(stack_samples(&split.target[..n].iter().collect::<Vec<_>>())?.0)
            };
            let kmm = export_kernel_magnitude(&mut state.network, probe.as_ref())?;
            write_file(&common.out("kmm.csv"), kmm.to_csv())?;
            write_file(&common.out("kmm_all.pgm"), to_pgm(&kmm.aggregate, kmm.k, 32))?;
            for (i, m) in &kmm.layers {
                write_file(&common.out(format!("kmm_block{i}.pgm")), to_pgm(m, kmm.k, 32))?;
            }
            let (cross, corners) = kmm.skeleton_vs_corners();
            emit(format!("layers={}\nskeleton_mean={cross}\ncorner_mean={corners}", kmm.layers.len()))?;
        }
        Command::ExportCoeffs {
            common,
            checkpoint,
            blocks,
            data,
        } => {
            let config = common.config()?;
            common.ensure_out_dir()?;
            let mut state = load_checkpoint(&common.out(checkpoint))?;
            let samples = dataset(&common, &config, data.as_ref())?;
            let blocks = if blocks.is_empty() {
                state.network.dynamic_blocks()
            } else {
                blocks
            };
            let dump = export_coefficients(&mut state.network, &samples, &blocks, config.training.eval_batch_size)?;
            let path = common.out("coefficients.csv");
            write_file(&path, dump.to_csv())?;
            emit(format!("coefficients={}\nrows={}", path.display(), dump.rows.len()))?;
        }
    }
    Ok(())
}

/// Parse `args` (program name first), run, and return the exit code:
/// 0 on success, 1 for invalid input, 2 for runtime or numeric failures.
pub fn main_with_args<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match run(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}
