//! Command-line front end: `synth`, `train`, `eval`, `ablate`, `inspect`.
//!
//! Every subcommand writes into an output directory, refuses to reuse one
//! that already holds a run manifest unless `--force` is given, and finishes
//! by writing `run_manifest.json` listing the emitted files with their hashes.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::data::{generate_synthetic, load_image, write_dataset, write_pgm, Modality, SynthConfig};
use crate::dfl::FusionMode;
use crate::error::{Error, Result};
use crate::eval::{metrics_json, per_query_csv, Protocol};
use crate::scl::{energy_maps, heatmap_pixels};
use crate::tensor::Tensor;
use crate::trainer::{ablation_csv, evaluate, run_ablation, run_training, AblationCell, Checkpoint, TrainConfig, TrainData};

pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Debug, Parser)]
#[command(name = "shipreid", version, about = "Optical-SAR ship re-identification toolkit")]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Output directory (created if absent).
    #[arg(long)]
    pub out: PathBuf,
    /// Overwrite artifacts of an earlier run in `--out`.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic optical/SAR dataset.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Train a model on a dataset directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory holding `manifest.jsonl`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Protocols to score (repeatable): all, opt2sar, sar2opt.
        #[arg(long, value_delimiter = ',', default_value = "all,opt2sar,sar2opt")]
        protocol: Vec<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Train and evaluate every cell of an ablation grid.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        grid: Grid,
        /// Seeds to train each cell with (default: three seeds from the base seed).
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Base seed override.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Export structural-energy heatmaps of one image at several layers.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, value_enum, default_value = "optical")]
        modality: ModalityArg,
        /// Layers to export (0 is the patch embedding); default 2, 4, ..., L.
        #[arg(long, value_delimiter = ',')]
        layers: Vec<usize>,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Grid {
    /// SCL on/off x DFL on/off.
    Modules,
    /// The four fusion strategies.
    Fusion,
    /// Structure probe at every block.
    StructLayer,
    /// Full model, both modules off, shared-only fusion.
    Efficacy,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModalityArg {
    Optical,
    Sar,
}

impl From<ModalityArg> for Modality {
    fn from(m: ModalityArg) -> Self {
        match m {
            ModalityArg::Optical => Modality::Optical,
            ModalityArg::Sar => Modality::Sar,
        }
    }
}

/// Cells of a preset grid around `base`.
pub fn grid_cells(grid: Grid, base: &TrainConfig) -> Vec<AblationCell> {
    let cell = AblationCell::of(base);
    match grid {
        Grid::Modules => [(false, false), (true, false), (false, true), (true, true)]
            .into_iter()
            .map(|(scl_on, dfl_on)| AblationCell { scl_on, dfl_on, ..cell })
            .collect(),
        Grid::Fusion => [
            FusionMode::SharedOnly,
            FusionMode::SpecificOnly,
            FusionMode::Concat,
            FusionMode::Additive,
        ]
        .into_iter()
        .map(|fusion| AblationCell {
            dfl_on: true,
            fusion,
            ..cell
        })
        .collect(),
        Grid::StructLayer => (1..=base.model.layers)
            .map(|struct_layer| AblationCell { struct_layer, ..cell })
            .collect(),
        Grid::Efficacy => vec![
            AblationCell {
                scl_on: true,
                dfl_on: true,
                fusion: FusionMode::Additive,
                ..cell
            },
            AblationCell {
                scl_on: false,
                dfl_on: false,
                ..cell
            },
            AblationCell {
                scl_on: true,
                dfl_on: true,
                fusion: FusionMode::SharedOnly,
                ..cell
            },
        ],
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn load_train_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::from_toml(&read_text(p)?).map_err(|e| Error::Config(format!("{}: {e}", p.display()))),
        None => Ok(TrainConfig::default()),
    }
}

fn load_synth_config(path: Option<&Path>) -> Result<SynthConfig> {
    match path {
        Some(p) => toml::from_str(&read_text(p)?).map_err(|e| Error::Config(format!("{}: {e}", p.display()))),
        None => Ok(SynthConfig::default()),
    }
}

fn prepare_out(common: &Common) -> Result<()> {
    let dir = &common.out;
    if dir.join(RUN_MANIFEST).exists() && !common.force {
        return Err(Error::Usage(format!(
            "{} already holds run artifacts; pass --force to overwrite",
            dir.display()
        )));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `run_manifest.json` listing every emitted file (relative to `dir`).
fn finish(dir: &Path, command: &str, files: &[PathBuf]) -> Result<()> {
    let entries = files
        .iter()
        .map(|f| {
            let bytes = std::fs::read(f).map_err(|e| Error::io(f, e))?;
            let rel = f.strip_prefix(dir).unwrap_or(f);
            Ok(json!({"path": rel.to_string_lossy(), "bytes": bytes.len(), "sha256": sha256_hex(&bytes)}))
        })
        .collect::<Result<Vec<_>>>()?;
    let doc = json!({"command": command, "files": entries});
    write_file(&dir.join(RUN_MANIFEST), serde_json::to_string_pretty(&doc)? + "\n")?;
    Ok(())
}

fn parse_protocols(names: &[String]) -> Result<Vec<Protocol>> {
    let mut out = Vec::new();
    for n in names {
        let p: Protocol = n.trim().parse()?;
        if !out.contains(&p) {
            out.push(p);
        }
    }
    if out.is_empty() {
        return Err(Error::Usage("no protocol requested".into()));
    }
    Ok(out)
}

fn cmd_synth(config: Option<&Path>, seed: Option<u64>, common: &Common) -> Result<()> {
    let mut cfg = load_synth_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    prepare_out(common)?;
    let data = generate_synthetic(&cfg)?;
    let mut files = write_dataset(&common.out, &data)?;
    let manifest_bytes = data.manifest.to_jsonl();
    let provenance = json!({
        "generator": "shipreid synthetic optical/SAR ships",
        "version": env!("CARGO_PKG_VERSION"),
        "seed": cfg.seed,
        "config": cfg,
        "num_images": data.images.len(),
        "manifest_sha256": sha256_hex(manifest_bytes.as_bytes()),
    });
    files.push(write_file(
        &common.out.join("provenance.json"),
        serde_json::to_string_pretty(&provenance)? + "\n",
    )?);
    log::info!("wrote {} images to {}", data.images.len(), common.out.display());
    finish(&common.out, "synth", &files)
}

fn cmd_train(
    config: Option<&Path>,
    data_dir: &Path,
    seed: Option<u64>,
    epochs: Option<usize>,
    common: &Common,
) -> Result<()> {
    let mut cfg = load_train_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(e) = epochs {
        cfg.epochs = e;
        cfg.warmup_epochs = cfg.warmup_epochs.min(e.saturating_sub(1));
    }
    cfg.validate()?;
    let data = TrainData::load(data_dir, cfg.model.image_h, cfg.model.image_w)?;
    prepare_out(common)?;
    let mut files = vec![write_file(&common.out.join("config.toml"), cfg.to_toml())?];
    let outcome = run_training(&cfg, &data, Some(&common.out))?;
    files.extend(outcome.files);
    finish(&common.out, "train", &files)
}

fn cmd_eval(checkpoint: &Path, data_dir: &Path, protocols: &[String], common: &Common) -> Result<()> {
    let protocols = parse_protocols(protocols)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = ckpt.model()?;
    let data = TrainData::load(data_dir, model.config.image_h, model.config.image_w)?;
    let reports = evaluate(&model, &data, &protocols)?;
    prepare_out(common)?;
    let (test_manifest, _) = data.subset(crate::data::Split::Test);
    let files = vec![
        write_file(
            &common.out.join("metrics.json"),
            serde_json::to_string_pretty(&metrics_json(&reports))? + "\n",
        )?,
        write_file(&common.out.join("per_query_ap.csv"), per_query_csv(&reports, &test_manifest))?,
    ];
    for r in &reports {
        println!(
            "{:>8}: mAP {:.4}  R1 {:.4}  R5 {:.4}  R10 {:.4}  ({} queries, {} gallery)",
            r.protocol.to_string(),
            r.map,
            r.rank1,
            r.rank5,
            r.rank10,
            r.num_query,
            r.num_gallery
        );
    }
    finish(&common.out, "eval", &files)
}

#[allow(clippy::too_many_arguments)]
fn cmd_ablate(
    config: Option<&Path>,
    data_dir: &Path,
    grid: Grid,
    seeds: &[u64],
    seed: Option<u64>,
    epochs: Option<usize>,
    common: &Common,
) -> Result<()> {
    let mut cfg = load_train_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(e) = epochs {
        cfg.epochs = e;
        cfg.warmup_epochs = cfg.warmup_epochs.min(e.saturating_sub(1));
    }
    cfg.validate()?;
    let data = TrainData::load(data_dir, cfg.model.image_h, cfg.model.image_w)?;
    prepare_out(common)?;
    let cells = grid_cells(grid, &cfg);
    let seeds: Vec<u64> = if seeds.is_empty() {
        (cfg.seed..cfg.seed + 3).collect()
    } else {
        seeds.to_vec()
    };
    let rows = run_ablation(&cfg, &cells, &seeds, &data)?;
    let files = vec![
        write_file(&common.out.join("config.toml"), cfg.to_toml())?,
        write_file(&common.out.join("ablation.csv"), ablation_csv(&rows))?,
    ];
    finish(&common.out, "ablate", &files)
}

fn cmd_inspect(
    checkpoint: &Path,
    image: &Path,
    modality: Modality,
    layers: &[usize],
    common: &Common,
) -> Result<()> {
    let model = Checkpoint::load(checkpoint)?.model()?;
    let cfg = &model.config;
    let layers: Vec<usize> = if layers.is_empty() {
        (2..=cfg.layers).step_by(2).collect()
    } else {
        layers.to_vec()
    };
    let pixels = load_image(image, cfg.image_h, cfg.image_w)?;
    let input = Tensor::new(&[1, cfg.in_channels, cfg.image_h, cfg.image_w], pixels)?;
    let grids = model.layer_grids(&input, &[modality], &layers)?;
    prepare_out(common)?;
    let mut files = Vec::new();
    let mut summary = Vec::new();
    for (&layer, grid) in layers.iter().zip(&grids) {
        let map = energy_maps(grid)?.swap_remove(0);
        let px = heatmap_pixels(&map, cfg.grid_h(), cfg.grid_w(), cfg.patch);
        let path = common.out.join(format!("heatmap_layer{layer}.pgm"));
        write_pgm(&path, cfg.image_w, cfg.image_h, &px)?;
        files.push(path);
        summary.push(json!({"layer": layer, "energy": map}));
    }
    files.push(write_file(
        &common.out.join("heatmaps.json"),
        serde_json::to_string_pretty(&json!({
            "grid_h": cfg.grid_h(), "grid_w": cfg.grid_w(), "layers": summary,
        }))? + "\n",
    )?);
    finish(&common.out, "inspect", &files)
}

/// Runs an already-parsed command line.
pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth { config, seed, common } => cmd_synth(config.as_deref(), *seed, common),
        Command::Train {
            config,
            data,
            seed,
            epochs,
            common,
        } => cmd_train(config.as_deref(), data, *seed, *epochs, common),
        Command::Eval {
            checkpoint,
            data,
            protocol,
            common,
        } => cmd_eval(checkpoint, data, protocol, common),
        Command::Ablate {
            config,
            data,
            grid,
            seeds,
            seed,
            epochs,
            common,
        } => cmd_ablate(config.as_deref(), data, *grid, seeds, *seed, *epochs, common),
        Command::Inspect {
            checkpoint,
            image,
            modality,
            layers,
            common,
        } => cmd_inspect(checkpoint, image, (*modality).into(), layers, common),
    }
}

/// Parses `args` (including the program name) and runs the command.
///
/// Argument errors are reported as usage errors; `--help` and `--version`
/// print and return `Ok`.
pub fn run<I, S>(args: I) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return Ok(());
            }
            return Err(Error::Usage(e.to_string()));
        }
    };
    execute(&cli)
}
