use std::collections::BTreeSet;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use latentbrdf::checkpoint::Checkpoint;
use latentbrdf::latent_tools::{
    decode_augmented, fit_manifold, traverse, tune_color_parameters, AugmentedCode,
    ManifoldConfig, TraversalSpec,
};
use latentbrdf::merl_io::{read_merl, write_merl, MerlBrdf};
use latentbrdf::metrics::{evaluate_code, MetricReport};
use latentbrdf::preprocess::{
    load_network_input, save_network_input, to_network_input, NetworkInput, NormConfig,
};
use latentbrdf::render_preview::{render_codes, render_sphere, Image, PreviewCode, PreviewScene};
use latentbrdf::synthetic::merl_family;
use latentbrdf::training::{train_with, TrainConfig};
use latentbrdf::vae_model::{LatentCode, ModelConfig};

#[derive(Parser)]
#[command(name = "latentbrdf", version, about = "Disentangled latent space over measured BRDFs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert MERL .binary files into normalized network inputs.
    Ingest {
        /// A .binary file or a directory of them.
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model from a TOML config; writes the checkpoint and a CSV loss record.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print the latent mean and standard deviation of a MERL file as JSON.
    Encode {
        #[arg(long)]
        checkpoint: PathBuf,
        input: PathBuf,
    },
    /// Decode a code (8 values, or 10 with the color controls) to a MERL .binary file.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        code: CodeArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a latent traversal contact sheet (one row per dimension).
    Traverse {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        code: CodeArgs,
        /// 1-based dimensions to sweep; all dimensions when omitted.
        #[arg(long, value_delimiter = ',')]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 7)]
        steps: usize,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_values_t = [-3.0, 3.0])]
        range: Vec<f64>,
        #[command(flatten)]
        scene: SceneArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build an augmented 10-value code and optionally tune the two color controls.
    Augment {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        code: CodeArgs,
        /// Green-diffuse control (defaults to dimension 1 of the base code).
        #[arg(long, allow_hyphen_values = true)]
        v9: Option<f64>,
        /// Green-specular control (defaults to the last dimension of the base code).
        #[arg(long, allow_hyphen_values = true)]
        v10: Option<f64>,
        /// Grid-search the controls against this measured MERL file.
        #[arg(long)]
        tune_against: Option<PathBuf>,
        /// Take these 1-based dimensions from another augmented code (JSON file).
        #[arg(long, requires = "mix_dims")]
        mix_with: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        mix_dims: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Also render a preview PNG.
        #[arg(long)]
        render: Option<PathBuf>,
        #[command(flatten)]
        scene: SceneArgs,
    },
    /// Fit the 2D manifold over the checkpoint's latent table.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Render the 7 x 7 grid of manifold samples to this PNG.
        #[arg(long)]
        grid: Option<PathBuf>,
        #[command(flatten)]
        scene: SceneArgs,
    },
    /// RelAE of decoded materials against their MERL files, as CSV.
    Metrics {
        #[arg(long)]
        checkpoint: PathBuf,
        /// MERL .binary files or directories.
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a sphere preview of a MERL file or a decoded code.
    Render {
        #[arg(long, conflicts_with = "checkpoint")]
        input: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        code: CodeArgs,
        #[command(flatten)]
        scene: SceneArgs,
        #[arg(long)]
        out: PathBuf,
        /// Also write the linear radiance as raw float32.
        #[arg(long)]
        raw: Option<PathBuf>,
    },
    /// Run the HTTP editing service.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifold: Option<PathBuf>,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
}

#[derive(Args)]
struct CodeArgs {
    /// Comma-separated code values.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    code: Option<Vec<f64>>,
    /// Use the stored mean code of a trained material.
    #[arg(long)]
    material: Option<String>,
}

#[derive(Args)]
struct SceneArgs {
    #[arg(long, default_value_t = 128)]
    size: usize,
    /// Direction towards the light (normalized), camera space.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    light: Option<Vec<f64>>,
    #[arg(long, default_value_t = 2.2)]
    gamma: f64,
    #[arg(long, default_value_t = 1.0)]
    exposure: f64,
}

impl SceneArgs {
    fn scene(&self) -> Result<PreviewScene> {
        let mut scene = PreviewScene {
            size: self.size,
            gamma: self.gamma,
            exposure: self.exposure,
            ..Default::default()
        };
        if let Some(l) = &self.light {
            if l.len() != 3 {
                bail!("--light needs three components");
            }
            let n = (l[0] * l[0] + l[1] * l[1] + l[2] * l[2]).sqrt();
            if n == 0.0 {
                bail!("--light must be nonzero");
            }
            scene.light_dir = [l[0] / n, l[1] / n, l[2] / n];
        }
        scene.validate()?;
        Ok(scene)
    }
}

impl CodeArgs {
    fn resolve(&self, ck: &Checkpoint) -> Result<PreviewCode> {
        match (&self.code, &self.material) {
            (Some(v), _) => Ok(PreviewCode::from_values(v.clone(), ck.latent_dim())?),
            (None, Some(name)) => ck
                .material_code(name)
                .map(PreviewCode::Latent)
                .with_context(|| format!("material {name:?} is not in the checkpoint")),
            (None, None) => Ok(PreviewCode::Latent(LatentCode(vec![0.0; ck.latent_dim()]))),
        }
    }

    fn latent(&self, ck: &Checkpoint) -> Result<LatentCode> {
        match self.resolve(ck)? {
            PreviewCode::Latent(c) => Ok(c),
            PreviewCode::Augmented(_) => bail!("expected {} values", ck.latent_dim()),
        }
    }
}

/// Training configuration file.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    /// Directory of .binary files or ingested .json inputs.
    data_dir: Option<PathBuf>,
    /// Train on this many analytic materials instead of a dataset.
    synthetic: Option<usize>,
    checkpoint: PathBuf,
    record: PathBuf,
    #[serde(default)]
    train: TrainConfig,
    #[serde(default)]
    model: ModelConfig,
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn files_with_ext(inputs: &[PathBuf], ext: &str) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .with_context(|| format!("reading {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == ext))
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

fn load_dataset(dir: &Path, norm: &NormConfig) -> Result<Vec<NetworkInput>> {
    let merl = files_with_ext(&[dir.to_path_buf()], "binary")?;
    if !merl.is_empty() {
        return merl
            .iter()
            .map(|p| {
                let b = read_merl(p).with_context(|| format!("reading {}", p.display()))?;
                Ok(to_network_input(&b, norm)?)
            })
            .collect();
    }
    let sidecars = files_with_ext(&[dir.to_path_buf()], "json")?;
    if sidecars.is_empty() {
        bail!("{} holds no .binary or .json inputs", dir.display());
    }
    sidecars
        .iter()
        .map(|p| {
            let (input, n) = load_network_input(p).with_context(|| format!("reading {}", p.display()))?;
            if n != *norm {
                bail!("{} was ingested with a different normalization", p.display());
            }
            Ok(input)
        })
        .collect()
}

fn write_image(img: &Image, path: &Path) -> Result<()> {
    img.write_png(path).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {} ({}x{})", path.display(), img.width, img.height);
    Ok(())
}

#[derive(Serialize)]
struct MetricRow<'a> {
    material: &'a str,
    #[serde(rename = "RelAE_ratio")]
    rel_ae_ratio: f64,
    #[serde(rename = "RelAE_pointwise")]
    rel_ae_pointwise: f64,
    entries: usize,
}

fn write_metrics(reports: &[MetricReport], out: Option<&Path>) -> Result<()> {
    let sink: Box<dyn std::io::Write> = match out {
        Some(p) => Box::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(std::io::stdout()),
    };
    let mut w = csv::Writer::from_writer(sink);
    for r in reports {
        w.serialize(MetricRow {
            material: &r.material,
            rel_ae_ratio: r.rel_ae_ratio,
            rel_ae_pointwise: r.rel_ae_pointwise,
            entries: r.entries_compared,
        })?;
    }
    w.flush()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest { input, out } => {
            fs::create_dir_all(&out)?;
            let norm = NormConfig::default();
            for p in files_with_ext(&[input], "binary")? {
                let b = read_merl(&p).with_context(|| format!("reading {}", p.display()))?;
                let sidecar = save_network_input(&to_network_input(&b, &norm)?, &norm, &out)?;
                println!("{}", sidecar.display());
            }
        }
        Command::Train { config } => {
            let text = fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let cfg: TrainFile = toml::from_str(&text).context("parsing training config")?;
            let norm = NormConfig::default();
            let inputs = match (&cfg.data_dir, cfg.synthetic) {
                (Some(dir), _) => load_dataset(dir, &norm)?,
                (None, Some(n)) => merl_family(n, 7)
                    .iter()
                    .map(|b| to_network_input(b, &norm))
                    .collect::<latentbrdf::Result<_>>()?,
                (None, None) => bail!("config needs data_dir or synthetic"),
            };
            println!("training on {} materials", inputs.len());
            let (ck, record) = train_with(&inputs, cfg.train, cfg.model, norm, |r| {
                println!("epoch {} recon {:.4} kl {:.4} total {:.4}", r.epoch, r.recon, r.kl, r.total);
            })?;
            ck.save(&cfg.checkpoint)?;
            fs::write(&cfg.record, record.to_csv())?;
            println!(
                "wrote {} and {} in {:.1}s",
                cfg.checkpoint.display(),
                cfg.record.display(),
                record.wall_clock_secs
            );
        }
        Command::Encode { checkpoint, input } => {
            let ck = load_checkpoint(&checkpoint)?;
            let b = read_merl(&input)?;
            let stats = ck.encode(&to_network_input(&b, &ck.norm)?)?;
            let out = serde_json::json!({ "material": b.name, "mu": stats.mu, "sigma": stats.sigma() });
            println!("{}", serde_json::to_string_pretty(&out)?);
        }
        Command::Decode { checkpoint, code, out } => {
            let ck = load_checkpoint(&checkpoint)?;
            let name = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let brdf = code.resolve(&ck)?.decode(&ck, &name)?;
            write_merl(&brdf, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Traverse { checkpoint, code, dims, steps, range, scene, out } => {
            let ck = load_checkpoint(&checkpoint)?;
            let base = code.latent(&ck)?;
            if range.len() != 2 {
                bail!("--range needs two values");
            }
            let dims = if dims.is_empty() { (1..=ck.latent_dim()).collect() } else { dims };
            let mut codes = Vec::new();
            for dim in dims {
                let spec = TraversalSpec { base: base.clone(), dim, range: [range[0], range[1]], steps };
                codes.extend(traverse(&spec)?.into_iter().map(PreviewCode::Latent));
            }
            write_image(&render_codes(&ck, &codes, &scene.scene()?, steps)?, &out)?;
        }
        Command::Augment { checkpoint, code, v9, v10, tune_against, mix_with, mix_dims, out, render, scene } => {
            let ck = load_checkpoint(&checkpoint)?;
            let mut v = match code.resolve(&ck)? {
                PreviewCode::Latent(c) => AugmentedCode::from_latent(&c),
                PreviewCode::Augmented(v) => v,
            };
            let n = ck.latent_dim();
            if let Some(x) = v9 {
                v.0[n] = x;
            }
            if let Some(x) = v10 {
                v.0[n + 1] = x;
            }
            if let Some(path) = tune_against {
                let reference = read_merl(&path)?;
                let input = to_network_input(&reference, &ck.norm)?;
                let before = evaluate_code(&ck, &v.base(), &reference, &input.mask)?;
                let grid: Vec<f64> = (0..=24).map(|i| -3.0 + 0.25 * i as f64).collect();
                let (tuned, report) = tune_color_parameters(&ck, &v.base(), &reference, &input.mask, &grid)?;
                println!(
                    "RelAE {:.4} with learned dimensions, {:.4} after tuning",
                    before.rel_ae_ratio, report.rel_ae_ratio
                );
                v = tuned;
            }
            if let Some(path) = mix_with {
                let other = AugmentedCode::from_json(&fs::read_to_string(&path)?)?;
                let dims: BTreeSet<usize> = mix_dims.into_iter().collect();
                v = latentbrdf::latent_tools::interpolate_selective(&other, &v, &dims)?;
            }
            v.validate(n)?;
            fs::write(&out, v.to_json())?;
            println!("{}", v.to_json());
            if let Some(png) = render {
                let brdf = decode_augmented(&ck, &v, "augmented")?;
                write_image(&render_sphere(&brdf, &scene.scene()?)?, &png)?;
            }
        }
        Command::Embed { checkpoint, out, seed, grid, scene } => {
            let ck = load_checkpoint(&checkpoint)?;
            let (names, latents): (Vec<String>, Vec<Vec<f64>>) =
                ck.latent_table.iter().map(|(n, s)| (n.clone(), s.mu.clone())).unzip();
            let model = fit_manifold(names, latents, ManifoldConfig { seed, ..Default::default() })?;
            model.save(&out)?;
            println!(
                "wrote {} ({} points, round-trip RMS {:.3e}, leave-one-out RMS {:.3})",
                out.display(),
                model.names.len(),
                model.round_trip_rms()?,
                model.leave_one_out_rms()?
            );
            if let Some(png) = grid {
                let codes: Vec<PreviewCode> = model
                    .sample_grid(7, 7)?
                    .into_iter()
                    .map(|g| PreviewCode::Latent(g.latent))
                    .collect();
                write_image(&render_codes(&ck, &codes, &scene.scene()?, 7)?, &png)?;
            }
        }
        Command::Metrics { checkpoint, inputs, out } => {
            let ck = load_checkpoint(&checkpoint)?;
            let mut reports = Vec::new();
            for p in files_with_ext(&inputs, "binary")? {
                let b = read_merl(&p).with_context(|| format!("reading {}", p.display()))?;
                let input = to_network_input(&b, &ck.norm)?;
                let code = match ck.material_code(&b.name) {
                    Some(c) => c,
                    None => ck.encode(&input)?.mean_code(),
                };
                reports.push(evaluate_code(&ck, &code, &b, &input.mask)?);
            }
            write_metrics(&reports, out.as_deref())?;
        }
        Command::Render { input, checkpoint, code, scene, out, raw } => {
            let brdf: MerlBrdf = match (input, checkpoint) {
                (Some(p), _) => read_merl(&p)?,
                (None, Some(ck)) => {
                    let ck = load_checkpoint(&ck)?;
                    code.resolve(&ck)?.decode(&ck, "decoded")?
                }
                (None, None) => bail!("render needs --input or --checkpoint"),
            };
            let img = render_sphere(&brdf, &scene.scene()?)?;
            write_image(&img, &out)?;
            if let Some(r) = raw {
                img.save_raw(&r)?;
                println!("wrote {}", r.display());
            }
        }
        Command::Serve { checkpoint, manifold, port, host } => {
            let state = latentbrdf_service::AppState::from_paths(Some(checkpoint), manifold)?;
            let addr: SocketAddr = format!("{host}:{port}").parse().context("parsing listen address")?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(latentbrdf_service::serve(Arc::new(state), addr))?;
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    tracing_subscriber::fmt().with_writer(std::io::stderr).init();
    run(Cli::parse())
}

