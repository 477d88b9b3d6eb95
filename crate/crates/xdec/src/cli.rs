//! `xdec` command line. Exit codes: 0 success, 1 usage error, 2 runtime error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use xdec_core::dataset::DatasetConfig;
use xdec_core::decgan::ComponentWeights;
use xdec_core::drr::{project_components, to_display, BoneSplit, DatasetNorm, Detector, Pose};
use xdec_core::metrics::DEFAULT_SIGMA;
use xdec_core::phantom::{generate_phantom, PhantomConfig};
use xdec_core::train::{evaluate, TrainConfig};

use crate::checkpoint::Checkpoint;
use crate::infer::{decompose, MAP_NAMES};
use crate::io::{atomic_write, f32_bytes, read_image, read_json, write_json, write_pgm};
use crate::pipeline::{build_dataset, check_eval_compatible, format_report, train};
use crate::store::{load_dataset, load_eval_set, load_volume, save_dataset, save_eval_set, save_volume};

#[derive(Debug, Parser)]
#[command(
    name = "xdec",
    version,
    about = "Unpaired chest X-ray decomposition and component modulation"
)]
pub struct Cli {
    /// Random seed for the subcommand.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON configuration file for the subcommand.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (or file, for `eval`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Identity,
    BoneSuppress,
    LungEnhance,
}

impl Preset {
    pub fn weights(self) -> ComponentWeights {
        match self {
            Preset::Identity => ComponentWeights::IDENTITY,
            Preset::BoneSuppress => ComponentWeights::BONE_SUPPRESS,
            Preset::LungEnhance => ComponentWeights::LUNG_ENHANCE,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a CT phantom with ground-truth labels.
    Phantom {
        /// Draw anatomy variations from the seed.
        #[arg(long)]
        varied: bool,
    },
    /// Project a phantom volume into total, bone, lung and other DRRs.
    Drr {
        #[arg(long)]
        volume: PathBuf,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        rotation: f32,
        #[arg(long, default_value_t = 1.0)]
        scale: f32,
        /// Square field of view in mm; defaults to the volume extent.
        #[arg(long)]
        fov_mm: Option<f32>,
        /// Line integral mapped to display value 1; defaults to the total's maximum.
        #[arg(long)]
        norm: Option<f32>,
    },
    /// Render the unpaired CXR and DRR corpora and the held-out eval set.
    Dataset {
        #[arg(long)]
        images_per_domain: Option<usize>,
        #[arg(long)]
        eval_images: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
    },
    /// Train the six networks.
    Train {
        /// Dataset directory (the `train` directory written by `dataset`).
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score bone suppression on an eval set.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        eval_set: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_SIGMA)]
        sigma: f64,
    },
    /// Decompose an image and reconstruct it with component weights.
    Modulate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// 16-bit or 8-bit binary PGM, or a raw `.f32` square image.
        #[arg(long)]
        image: PathBuf,
        /// `alpha_b,alpha_l,alpha_o`.
        #[arg(long, value_parser = parse_alphas, allow_hyphen_values = true, conflicts_with = "preset")]
        alphas: Option<ComponentWeights>,
        #[arg(long, value_enum)]
        preset: Option<Preset>,
    },
    /// Serve `/modulate` and `/health` over HTTP.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = crate::service::DEFAULT_PORT)]
        port: u16,
    },
}

fn parse_alphas(s: &str) -> Result<ComponentWeights, String> {
    let v: Vec<f32> = s
        .split(',')
        .map(|p| p.trim().parse::<f32>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    let [b, l, o] = v[..] else {
        return Err(format!("expected 3 comma-separated values, got {}", v.len()));
    };
    let w = ComponentWeights::new(b, l, o);
    w.validate().map_err(|e| e.to_string())?;
    Ok(w)
}

/// Parses `argv` and runs the command; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

fn need_out(out: &Option<PathBuf>) -> Result<&Path> {
    out.as_deref().context("--out is required")
}

fn config_or<T: serde::de::DeserializeOwned>(path: &Option<PathBuf>, default: impl FnOnce() -> T) -> Result<T> {
    match path {
        Some(p) => read_json(p),
        None => Ok(default()),
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    let Cli {
        seed,
        config,
        out,
        command,
    } = cli;
    match command {
        Command::Phantom { varied } => {
            let out = need_out(&out)?;
            let seed = seed.unwrap_or(0);
            let mut cfg = config_or(&config, || {
                if varied {
                    PhantomConfig::varied(seed)
                } else {
                    PhantomConfig::default()
                }
            })?;
            cfg.seed = seed;
            let (vol, labels) = generate_phantom(&cfg)?;
            save_volume(out, &vol, &labels, Some(&cfg))?;
            let f = labels.fractions();
            println!(
                "wrote {} ({:?} voxels; air {:.3} bone {:.3} lung {:.3} other {:.3})",
                out.display(),
                vol.grid.extents,
                f[0],
                f[1],
                f[2],
                f[3]
            );
        }
        Command::Drr {
            volume,
            size,
            rotation,
            scale,
            fov_mm,
            norm,
        } => {
            let out = need_out(&out)?;
            let (vol, labels) = load_volume(&volume)?;
            let pose = Pose {
                rotation_deg: rotation,
                scale,
            };
            let mut det = Detector::new(size, size);
            if let Some(f) = fov_mm {
                det = det.with_fov([f, f]);
            }
            let d = project_components(&vol, &labels, pose, &det, BoneSplit::default())?;
            let norm = match norm {
                Some(n) => DatasetNorm::new(n)?,
                None => DatasetNorm::from_images([&d.total])?,
            };
            let [bone, lung, other] = d.components();
            for (name, img) in [("total", &d.total), ("bone", bone), ("lung", lung), ("other", other)] {
                atomic_write(&out.join(format!("{name}.f32")), &f32_bytes(&img.data))?;
                write_pgm(&out.join(format!("{name}.pgm")), &to_display(img, norm))?;
            }
            write_json(
                &out.join("drr.json"),
                &serde_json::json!({ "pose": pose, "detector": det, "norm": norm, "size": size }),
            )?;
            println!(
                "wrote {} (additivity error {:.2e})",
                out.display(),
                d.additivity_error()
            );
        }
        Command::Dataset {
            images_per_domain,
            eval_images,
            size,
        } => {
            let out = need_out(&out)?;
            let mut cfg: DatasetConfig = config_or(&config, DatasetConfig::default)?;
            if let Some(s) = seed {
                cfg.split_seed = s;
            }
            if let Some(n) = images_per_domain {
                cfg.images_per_domain = n;
            }
            if let Some(n) = eval_images {
                cfg.eval_images = n;
            }
            if let Some(n) = size {
                cfg.image_size = n;
            }
            cfg.validate()?;
            let (data, eval) = build_dataset(&cfg)?;
            save_dataset(&out.join("train"), &data, Some(&cfg))?;
            save_eval_set(&out.join("eval"), &eval)?;
            println!(
                "wrote {}: {} CXR, {} DRR, {} eval images ({}×{})",
                out.display(),
                data.cxr.len(),
                data.drr.len(),
                eval.samples.len(),
                cfg.image_size,
                cfg.image_size
            );
        }
        Command::Train { dataset, steps, resume } => {
            let out = need_out(&out)?;
            let mut cfg: TrainConfig = config_or(&config, TrainConfig::default)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(s) = steps {
                cfg.steps = s;
            }
            let dir = dataset
                .or_else(|| cfg.dataset_dir.as_ref().map(PathBuf::from))
                .context("no dataset: pass --dataset or set dataset_dir in the config")?;
            cfg.dataset_dir = Some(dir.to_string_lossy().into_owned());
            let data = load_dataset(&dir).with_context(|| format!("loading dataset {}", dir.display()))?;
            let total = cfg.steps;
            let every = (total / 20).max(1);
            let outcome = train(&cfg, &data, out, resume.as_deref(), |step, r| {
                if step % every == 0 || step == total {
                    eprintln!(
                        "step {step}/{total}  L_Dec {:.4}  L_cycX {:.4}  L_mask {:.4}",
                        r.l_dec, r.l_cyc_x, r.l_mask
                    );
                }
            })?;
            println!("wrote {}", outcome.final_checkpoint.display());
        }
        Command::Eval {
            checkpoint,
            eval_set,
            sigma,
        } => {
            let ck = Checkpoint::load(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let dir = eval_set
                .or_else(|| ck.trainer.config.eval_dir.as_ref().map(PathBuf::from))
                .context("no eval set: pass --eval-set")?;
            let eval = load_eval_set(&dir).with_context(|| format!("loading eval set {}", dir.display()))?;
            check_eval_compatible(&ck, &eval)?;
            let report = evaluate(&ck.trainer.nets, &eval, sigma)?;
            print!("{}", format_report(&report));
            let path = out.unwrap_or_else(|| checkpoint.with_extension("report.json"));
            write_json(&path, &report)?;
            println!("wrote {}", path.display());
        }
        Command::Modulate {
            checkpoint,
            image,
            alphas,
            preset,
        } => {
            let out = need_out(&out)?;
            let w = match (alphas, preset) {
                (Some(a), _) => a,
                (None, Some(p)) => p.weights(),
                (None, None) => bail!("give --alphas or --preset"),
            };
            let ck = Checkpoint::load(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let img = read_image(&image)?;
            let size = ck.trainer.config.image_size;
            ensure!(
                img.dims() == (size, size),
                "{}: expected {size}×{size}, got {}×{}",
                image.display(),
                img.height,
                img.width
            );
            let d = decompose(&ck.trainer.nets, size, &img, w)?;
            write_pgm(&out.join("x_m.pgm"), &d.x_m)?;
            atomic_write(&out.join("x_m.f32"), &f32_bytes(&d.x_m.data))?;
            for (name, m) in MAP_NAMES.iter().zip(&d.maps) {
                write_pgm(&out.join(format!("{name}.pgm")), m)?;
                atomic_write(&out.join(format!("{name}.f32")), &f32_bytes(&m.data))?;
            }
            println!("wrote {}", out.display());
        }
        Command::Serve { checkpoint, port } => {
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(crate::service::serve(checkpoint, port))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn usage_errors_exit_1() {
        assert_eq!(run(["xdec", "bogus"]), 1);
        assert_eq!(run(["xdec", "phantom", "--nope"]), 1);
        assert_eq!(run(["xdec", "--help"]), 0);
        assert_eq!(run(["xdec", "modulate", "--help"]), 0);
    }

    #[test]
    fn presets_match_weights() {
        assert_eq!(Preset::LungEnhance.weights(), ComponentWeights::new(1.0, 2.0, 1.0));
        assert_eq!(Preset::BoneSuppress.weights(), ComponentWeights::new(0.0, 1.0, 1.0));
        assert_eq!(Preset::Identity.weights(), ComponentWeights::new(1.0, 1.0, 1.0));
    }

    #[test]
    fn alphas_parse_as_triples() {
        assert_eq!(parse_alphas("0.5,-1,2"), Ok(ComponentWeights::new(0.5, -1.0, 2.0)));
        assert!(parse_alphas("1,2").is_err());
        assert!(parse_alphas("1,x,2").is_err());
        assert!(parse_alphas("1,nan,2").is_err());
        let argv = [
            "xdec",
            "modulate",
            "--checkpoint",
            "c",
            "--image",
            "i",
            "--alphas",
            "-1,2,1",
        ];
        let cli = Cli::try_parse_from(argv).unwrap();
        let Command::Modulate { alphas, .. } = cli.command else {
            panic!("wrong subcommand")
        };
        assert_eq!(alphas, Some(ComponentWeights::new(-1.0, 2.0, 1.0)));
        assert_eq!(
            run([
                "xdec",
                "modulate",
                "--checkpoint",
                "c",
                "--image",
                "i",
                "--alphas",
                "1,2"
            ]),
            1
        );
    }

    #[test]
    fn runtime_errors_exit_2() {
        assert_eq!(
            run([
                "xdec",
                "eval",
                "--checkpoint",
                "/nonexistent/ck.xdec",
                "--eval-set",
                "/nonexistent"
            ]),
            2
        );
    }
}
