//! One binary for the whole pipeline: phantom dataset generation, two-phase
//! training, one-shot harmonization, and metric evaluation.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use config::CliConfig;
use voxharm::metrics::{
    evaluate_direction, evaluate_direction_with, MaskPolicy, MetricsReport,
};
use voxharm::model::{harmonize_volume, load_checkpoint};
use voxharm::phantom::{generate_dataset, read_manifest, resolve_path};
use voxharm::train::{pretrain_phase1, split_dataset, train_phase2, DatasetSplit};
use voxharm::volume::{inverse_normalize, read_volume, resample_to_cube, write_volume, Volume};

#[derive(Parser)]
#[command(name = "voxharm", version, about = "One-shot 3D intensity harmonization pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file with `section.key = value` lines
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, repeatable: --set train.epochs=50
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<CliConfig> {
        CliConfig::load(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-site phantom dataset with labels
    GenPhantom {
        #[arg(long)]
        out: PathBuf,
        /// Number of sites (built-in profiles)
        #[arg(long)]
        sites: Option<usize>,
        /// Volumes per site
        #[arg(long)]
        n: Option<usize>,
        /// Master seed
        #[arg(long)]
        seed: Option<u64>,
        /// Cube edge in voxels
        #[arg(long)]
        edge: Option<usize>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Phase 1: pre-train the autoencoder on patches from all sites
    Pretrain {
        /// Dataset manifest
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Phase 2: train the style-transfer decoder with the encoder frozen
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Phase-1 checkpoint
        #[arg(long)]
        phase1: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Ablation: drop the consistency objective (lambda_consistency = 0)
        #[arg(long)]
        no_consistency: bool,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Harmonize one volume against a target-site exemplar
    Harmonize {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        exemplar: PathBuf,
        /// Checkpoint path
        #[arg(long)]
        model: PathBuf,
        /// Output volume path
        #[arg(long)]
        out: PathBuf,
        /// Map the result back to the input's stored intensity range
        #[arg(long)]
        apply_inverse: bool,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Evaluate harmonization metrics over site-pair directions
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path, or `identity` for the prediction := input baseline
        #[arg(long)]
        model: String,
        /// Comma-separated directions, e.g. site_a->site_b,site_b->site_a
        #[arg(long)]
        directions: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let msg = format!("{err:#}").replace('\n', "; ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenPhantom {
            out,
            sites,
            n,
            seed,
            edge,
            config,
        } => {
            let mut cfg = config.load()?;
            if let Some(s) = sites {
                cfg.set("data.sites", s)?;
            }
            if let Some(n) = n {
                cfg.set("data.n_per_site", n)?;
            }
            if let Some(s) = seed {
                cfg.set("data.seed", s)?;
            }
            if let Some(e) = edge {
                cfg.set("data.edge", e)?;
            }
            let n_per_site = cfg.usize_key("data.n_per_site")?;
            if n_per_site == 0 {
                bail!("--n must be at least 1");
            }
            let edge = cfg.usize_key("data.edge")?;
            if edge < 16 {
                bail!("--edge must be at least 16");
            }
            let profiles = cfg.site_profiles()?;
            cfg.write_echo(&out)?;
            let started = Instant::now();
            let manifest =
                generate_dataset(n_per_site, &profiles, &out, cfg.u64_key("data.seed")?, edge)?;
            eprintln!(
                "wrote {} volumes across {} sites to {} in {:.1}s",
                manifest.len(),
                profiles.len(),
                out.display(),
                started.elapsed().as_secs_f64()
            );
            println!("{}", out.join("manifest.tsv").display());
            Ok(())
        }

        Command::Pretrain { data, out, config } => {
            let cfg = config.load()?;
            let train_cfg = cfg.train_config(1)?;
            let manifest = read_manifest(&data)
                .with_context(|| format!("reading manifest {}", data.display()))?;
            let split = split_dataset(&manifest, 1, train_cfg.seed, None)?;
            cfg.write_echo(&out)?;
            let started = Instant::now();
            let outcome = pretrain_phase1(&data, &split, &train_cfg, &out)?;
            let best = outcome
                .log
                .best_epoch()
                .ok_or_else(|| anyhow!("no best epoch recorded"))?;
            eprintln!(
                "phase 1 done in {:.1}s: best val {:.5} at epoch {}",
                started.elapsed().as_secs_f64(),
                best.val_total,
                best.epoch
            );
            println!("{}", outcome.checkpoint_path.display());
            Ok(())
        }

        Command::Train {
            data,
            phase1,
            out,
            no_consistency,
            config,
        } => {
            let mut cfg = config.load()?;
            if no_consistency {
                cfg.set("train.lambda_consistency", 0)?;
            }
            let train_cfg = cfg.train_config(2)?;
            let manifest = read_manifest(&data)
                .with_context(|| format!("reading manifest {}", data.display()))?;
            let split = split_dataset(
                &manifest,
                2,
                train_cfg.seed,
                train_cfg.held_out_site.as_deref(),
            )?;
            cfg.write_echo(&out)?;
            let started = Instant::now();
            let outcome = train_phase2(&data, &split, &phase1, &train_cfg, &out)?;
            let best = outcome
                .log
                .best_epoch()
                .ok_or_else(|| anyhow!("no best epoch recorded"))?;
            eprintln!(
                "phase 2 done in {:.1}s: best val {:.5} at epoch {} (held out: {})",
                started.elapsed().as_secs_f64(),
                best.val_total,
                best.epoch,
                split.held_out.as_deref().unwrap_or("-")
            );
            println!("{}", outcome.checkpoint_path.display());
            Ok(())
        }

        Command::Harmonize {
            input,
            exemplar,
            model,
            out,
            apply_inverse,
            config,
        } => {
            let cfg = config.load()?;
            let input_vol = read_volume(&input)
                .with_context(|| format!("reading input {}", input.display()))?;
            let mut exemplar_vol = read_volume(&exemplar)
                .with_context(|| format!("reading exemplar {}", exemplar.display()))?;
            let (model, meta) = load_checkpoint(&model)
                .with_context(|| format!("loading checkpoint {}", model.display()))?;
            let patch = meta.patch_size as usize;
            let overlap = cfg.overlap(patch)?;
            if exemplar_vol.dims != input_vol.dims {
                let (nz, ny, nx) = input_vol.dims;
                if nz != ny || ny != nx {
                    bail!(
                        "input dims {:?} are not cubic; cannot resample the exemplar to match",
                        input_vol.dims
                    );
                }
                exemplar_vol = resample_to_cube(&exemplar_vol, nz)?;
            }
            let mut result = harmonize_volume(&input_vol, &exemplar_vol, &model, patch, overlap)?;
            if apply_inverse {
                result = inverse_normalize(&result)?;
            }
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            write_volume(&result, &out)?;
            let echo_path = out.with_extension("config.txt");
            std::fs::write(echo_path, cfg.echo())?;
            println!("{}", out.display());
            Ok(())
        }

        Command::Evaluate {
            data,
            model,
            directions,
            out,
            config,
        } => {
            let cfg = config.load()?;
            let train_cfg = cfg.train_config(2)?;
            let manifest = read_manifest(&data)
                .with_context(|| format!("reading manifest {}", data.display()))?;
            let split = split_dataset(
                &manifest,
                2,
                train_cfg.seed,
                train_cfg.held_out_site.as_deref(),
            )?;
            let policy = match cfg.get("eval.mask_policy") {
                "foreground" => MaskPolicy::Foreground {
                    threshold: cfg.f32_key("eval.mask_threshold")?,
                },
                "all" => MaskPolicy::AllVoxels,
                other => bail!("eval.mask_policy must be `foreground` or `all`, got {other:?}"),
            };
            let bins = cfg.usize_key("eval.bins")?;
            cfg.write_echo(&out)?;

            let started = Instant::now();
            let mut reports = Vec::new();
            for direction in directions.split(',') {
                let direction = direction.trim();
                let (src, dst) = direction
                    .split_once("->")
                    .ok_or_else(|| anyhow!("direction {direction:?} must look like site_a->site_b"))?;
                let report = evaluate_one_direction(
                    &data, &split, &model, src.trim(), dst.trim(), &cfg, policy, bins,
                )?;
                report.write_to(out.join(format!("metrics_{}_{}.csv", src.trim(), dst.trim())))?;
                reports.push(report);
            }
            let merged = MetricsReport::merge(reports);
            merged.write_to(out.join("metrics.csv"))?;
            eprintln!(
                "evaluated {} cases in {:.1}s",
                merged.cases.len(),
                started.elapsed().as_secs_f64()
            );
            println!("{}", out.join("metrics.csv").display());
            Ok(())
        }
    }
}

/// Test inputs come from the source site's test split; the exemplar is the
/// first test-split volume of the target site.
#[allow(clippy::too_many_arguments)]
fn evaluate_one_direction(
    manifest_path: &Path,
    split: &DatasetSplit,
    model_arg: &str,
    src: &str,
    dst: &str,
    cfg: &CliConfig,
    policy: MaskPolicy,
    bins: usize,
) -> Result<MetricsReport> {
    let src_split = split
        .sites
        .get(src)
        .ok_or_else(|| anyhow!("unknown source site {src:?}"))?;
    let dst_split = split
        .sites
        .get(dst)
        .ok_or_else(|| anyhow!("unknown target site {dst:?}"))?;
    if src_split.test.is_empty() {
        bail!("site {src} has no test volumes");
    }
    if dst_split.test.is_empty() {
        bail!("site {dst} has no test volumes");
    }

    let inputs: Vec<(String, Volume)> = src_split
        .test
        .iter()
        .map(|e| {
            let path = resolve_path(manifest_path, &e.volume_path);
            let vol = read_volume(&path)
                .with_context(|| format!("reading test volume {}", path.display()))?;
            let case_id = e
                .volume_path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| e.subject_seed.to_string());
            Ok((format!("{src}_{case_id}"), vol))
        })
        .collect::<Result<_>>()?;
    let exemplar_path = resolve_path(manifest_path, &dst_split.test[0].volume_path);
    let exemplar = read_volume(&exemplar_path)
        .with_context(|| format!("reading exemplar {}", exemplar_path.display()))?;

    let report = if model_arg == "identity" {
        evaluate_direction_with(
            |input, _| Ok(input.clone()),
            &inputs,
            &exemplar,
            policy,
            bins,
        )?
    } else {
        let (model, meta) = load_checkpoint(Path::new(model_arg))
            .with_context(|| format!("loading checkpoint {model_arg}"))?;
        let patch = meta.patch_size as usize;
        let overlap = cfg.overlap(patch)?;
        evaluate_direction(&model, patch, overlap, &inputs, &exemplar, policy, bins)?
    };
    Ok(report)
}
