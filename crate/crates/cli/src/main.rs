use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lidar_uda::ablation::{ablation_csv, grid_cells, run_ablation_matrix};
use lidar_uda::config::Config;
use lidar_uda::dataset::{generate_dataset, read_dataset, write_dataset, Dataset};
use lidar_uda::eval::{eval_report_csv, evaluate_triads};
use lidar_uda::nets::SegNet;
use lidar_uda::snapshot::{load_snapshot, Snapshot};
use lidar_uda::trainer::{
    pretrain_2d, self_train_pl, train_comodal, write_pretrained, write_run_artifacts, CONFIG_FILE, NET_2D_FILE,
    NET_3D_FILE, PRETRAINED_FILE, TEACHER_FILE,
};
use lidar_uda::{Error, Result};

#[derive(Parser)]
#[command(name = "lidar-uda", version, about = "Cross-modal domain adaptation for LiDAR segmentation on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic source and target datasets.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the 2D network on labeled source images only.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Joint 2D/3D training on the target domain.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Frozen 2D snapshot; trained on the spot when absent and needed.
        #[arg(long)]
        pretrained: Option<PathBuf>,
    },
    /// Retrain from scratch with pseudo-labels from a previous run's ensemble.
    PlRound {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Directory of the previous run.
        #[arg(long)]
        prev: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        pretrained: Option<PathBuf>,
    },
    /// Evaluate a run's snapshots on the target validation split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Run directory holding the snapshots and config echo.
        #[arg(long)]
        run: PathBuf,
        /// Where to write eval_report.csv (defaults to the run directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an ablation grid over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// table2, table3, table5, pixels, masks or all.
        #[arg(long, default_value = "table2")]
        grid: String,
        /// Comma-separated seed list.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the training seed (the data seed for gen-data).
    #[arg(long)]
    seed: Option<u64>,
    /// Any config key, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    use_hybrid_pl: Option<bool>,
    #[arg(long)]
    use_icd: Option<bool>,
    #[arg(long)]
    use_icg: Option<bool>,
    #[arg(long)]
    use_teacher_labels: Option<bool>,
    #[arg(long = "use-2d-labels-in-icg")]
    use_2d_labels_in_icg: Option<bool>,
    /// projection, random or all.
    #[arg(long)]
    icd_pixel_select: Option<String>,
    /// full, mix-only or prototype-only.
    #[arg(long)]
    icd_variant: Option<String>,
    /// region or class.
    #[arg(long)]
    mask_kind: Option<String>,
    /// Region-mask area fractions as `lo,hi`.
    #[arg(long)]
    area_range: Option<String>,
    #[arg(long)]
    pl_round: Option<bool>,
}

impl Common {
    fn resolve(&self, seed_key: &str) -> Result<Config> {
        let mut config = match &self.config {
            Some(path) => Config::load(path)?,
            None => Config::default(),
        };
        let flags = [
            ("use_hybrid_pl", self.use_hybrid_pl.map(|b| b.to_string())),
            ("use_icd", self.use_icd.map(|b| b.to_string())),
            ("use_icg", self.use_icg.map(|b| b.to_string())),
            ("use_teacher_labels", self.use_teacher_labels.map(|b| b.to_string())),
            ("use_2d_labels_in_icg", self.use_2d_labels_in_icg.map(|b| b.to_string())),
            ("icd_pixel_select", self.icd_pixel_select.clone()),
            ("icd_variant", self.icd_variant.clone()),
            ("mask_kind", self.mask_kind.clone()),
            ("area_range", self.area_range.clone()),
            ("pl_round", self.pl_round.map(|b| b.to_string())),
            (seed_key, self.seed.map(|s| s.to_string())),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                config.set(key, &v)?;
            }
        }
        for kv in &self.sets {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            config.set(k.trim(), v.trim())?;
        }
        config.validate()?;
        Ok(config)
    }
}

fn load_net(path: &Path) -> Result<SegNet<f32>> {
    Ok(load_snapshot(path)?.net)
}

fn load_checked(dir: &Path, file: &str, hash: &str) -> Result<Snapshot> {
    let snap = load_snapshot(&dir.join(file))?;
    if snap.config_hash != hash {
        return Err(Error::Contract(format!(
            "{file} was written under config {}, the run's config echo hashes to {hash}",
            snap.config_hash
        )));
    }
    Ok(snap)
}

/// The frozen 2D network: from a file, or trained here when hybrid labels need one.
fn obtain_pretrained(dataset: &Dataset, config: &Config, path: Option<&Path>, out: &Path) -> Result<Option<SegNet<f32>>> {
    if let Some(p) = path {
        return load_net(p).map(Some);
    }
    if !config.train.ablation.use_hybrid_pl {
        return Ok(None);
    }
    let pre = pretrain_2d(dataset, config)?;
    write_pretrained(out, config, &pre)?;
    Ok(Some(pre.net))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, out } => {
            let config = common.resolve("data_seed")?;
            let dataset = generate_dataset(&config.scene)?;
            write_dataset(&dataset, &out)?;
            write_text(&out.join(CONFIG_FILE), &config.to_text())?;
            println!("wrote dataset to {}", out.display());
        }
        Command::Pretrain { common, data, out } => {
            let config = common.resolve("seed")?;
            let dataset = read_dataset(&data)?;
            let pre = pretrain_2d(&dataset, &config)?;
            write_pretrained(&out, &config, &pre)?;
            println!("source-val pixel accuracy {:.4}", pre.source_val_accuracy);
        }
        Command::Train {
            common,
            data,
            out,
            pretrained,
        } => {
            let config = common.resolve("seed")?;
            let dataset = read_dataset(&data)?;
            create_dir(&out)?;
            let pre = obtain_pretrained(&dataset, &config, pretrained.as_deref(), &out)?;
            let base = train_comodal(&dataset, pre.as_ref(), &config, None)?;
            let outcome = if config.train.ablation.pl_round {
                write_run_artifacts(&out.join("base"), &dataset, &base)?;
                self_train_pl(&dataset, &base.net_2d, &base.net_3d, pre.as_ref(), &config)?
            } else {
                base
            };
            write_run_artifacts(&out, &dataset, &outcome)?;
            print!("{}", eval_report_csv(&outcome.report));
        }
        Command::PlRound {
            common,
            data,
            prev,
            out,
            pretrained,
        } => {
            let config = match common.config {
                Some(_) => common.resolve("seed")?,
                None => {
                    let mut c = Config::load(&prev.join(CONFIG_FILE))?;
                    if let Some(s) = common.seed {
                        c.train.seed = s;
                    }
                    for kv in &common.sets {
                        let (k, v) = kv
                            .split_once('=')
                            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
                        c.set(k.trim(), v.trim())?;
                    }
                    c.validate()?;
                    c
                }
            };
            let dataset = read_dataset(&data)?;
            let prev_config = Config::load(&prev.join(CONFIG_FILE))?;
            let hash = prev_config.hash();
            let net_2d = load_checked(&prev, NET_2D_FILE, &hash)?.net;
            let net_3d = load_checked(&prev, NET_3D_FILE, &hash)?.net;
            create_dir(&out)?;
            let saved = prev.join(PRETRAINED_FILE);
            let pre_path = pretrained.or_else(|| saved.exists().then_some(saved));
            let pre = obtain_pretrained(&dataset, &config, pre_path.as_deref(), &out)?;
            let outcome = self_train_pl(&dataset, &net_2d, &net_3d, pre.as_ref(), &config)?;
            write_run_artifacts(&out, &dataset, &outcome)?;
            print!("{}", eval_report_csv(&outcome.report));
        }
        Command::Eval { data, run, out } => {
            let config = Config::load(&run.join(CONFIG_FILE))?;
            let hash = config.hash();
            let dataset = read_dataset(&data)?;
            let net_2d = load_checked(&run, NET_2D_FILE, &hash)?.net;
            let net_3d = load_checked(&run, NET_3D_FILE, &hash)?.net;
            let teacher = load_checked(&run, TEACHER_FILE, &hash)?.net;
            let report = evaluate_triads(&net_2d, &net_3d, Some(&teacher), &dataset.target_val)?;
            let csv = eval_report_csv(&report);
            let dir = out.unwrap_or(run);
            create_dir(&dir)?;
            write_text(&dir.join("eval_report.csv"), &csv)?;
            print!("{csv}");
        }
        Command::Ablate {
            common,
            data,
            out,
            grid,
            seeds,
            jobs,
        } => {
            let config = common.resolve("seed")?;
            let cells = grid_cells(&grid)?;
            let dataset = read_dataset(&data)?;
            create_dir(&out)?;
            write_text(&out.join(CONFIG_FILE), &config.to_text())?;
            let results = run_ablation_matrix(&dataset, &config, &cells, &seeds, jobs)?;
            let csv = ablation_csv(&results);
            write_text(&out.join("ablation.csv"), &csv)?;
            print!("{csv}");
        }
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| io_error(path, e))
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = e.to_string().replace('\\', "\\\\").replace('"', "\\\"").replace('\n', " ");
            eprintln!("error: kind={} message=\"{message}\"", e.kind());
            ExitCode::from(1)
        }
    }
}
