//! `rvn`: train, run and evaluate the voxel instance completion pipeline.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rvn_core::detection::cluster_anchors;
use rvn_core::pipeline::{
    self, evaluate, infer_scene, load_checkpoint, load_config, train, tsdf_slice_images,
    write_predictions_jsonl, PipelineConfig, ScenePool,
};
use rvn_core::scene::archive::load_scene;
use rvn_core::Error;

#[derive(Parser)]
#[command(name = "rvn", about = "Voxel-based 3D instance detection and completion", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from procedurally generated or archived scenes.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for checkpoints and the train log.
        #[arg(long)]
        out: PathBuf,
        /// Print a progress line every N steps (0 = quiet).
        #[arg(long, default_value_t = 50)]
        print_every: usize,
    },
    /// Run whole-scene inference on one scene archive.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        /// Output JSON-lines prediction file.
        #[arg(long)]
        out: PathBuf,
        /// Optional config overriding the [infer] section defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write grayscale axial TSDF slices as PNGs into this directory.
        #[arg(long)]
        dump_slices: Option<PathBuf>,
    },
    /// Evaluate a checkpoint over a directory of scene archives.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scenes: PathBuf,
        /// Output JSON metrics report.
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Generate labeled synthetic scenes with rendered views.
    MakeData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cluster anchor sizes from the ground truth of scene archives.
    Anchors {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long, default_value_t = 9)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (category, message) = match err.downcast_ref::<Error>() {
                Some(e) => (e.category(), e.to_string()),
                None => ("cli", err.to_string()),
            };
            // One machine-parsable line on stderr.
            eprintln!("{}", serde_json::json!({ "error": category, "message": message }));
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train { config, out, print_every } => {
            let cfg = load_config(&config)?;
            let mut last_print = 0usize;
            let trained = train(&cfg, Some(&out), &mut |rec| {
                if print_every > 0 && (rec.step == 0 || rec.step + 1 - last_print >= print_every) {
                    println!(
                        "step {:>6}  lr {:.5}  total {:.4}  obj {:.4}  box {:.4}  cls {:.4}  compl {:.4}  proxy {:.4}",
                        rec.step, rec.lr, rec.total, rec.objectness, rec.bbox, rec.class,
                        rec.completion, rec.proxy
                    );
                    last_print = rec.step + 1;
                }
            })?;
            println!(
                "trained {} steps; final checkpoint at {}",
                trained.log.len(),
                out.join("model.rvnt").display()
            );
            Ok(())
        }
        Command::Infer { checkpoint, scene, out, config, dump_slices } => {
            let (model, anchors) = load_checkpoint(&checkpoint)?;
            let icfg = match config {
                Some(p) => load_config(&p)?.infer,
                None => Default::default(),
            };
            let (scene_data, views) = load_scene(&scene)?;
            let tsdf = rvn_core::fusion::fuse_tsdf(
                &views,
                scene_data.extents,
                scene_data.voxel_size,
            )?;
            let preds = infer_scene(&model, &anchors, &views, &tsdf, &icfg)?;
            write_predictions_jsonl(&out, &preds, model.config.n_classes)?;
            println!("{} predictions written to {}", preds.len(), out.display());
            if let Some(dir) = dump_slices {
                std::fs::create_dir_all(&dir)?;
                for (name, w, h, bytes) in tsdf_slice_images(&tsdf) {
                    let img = image::GrayImage::from_raw(w as u32, h as u32, bytes)
                        .ok_or_else(|| Error::Invalid("slice buffer size".into()))?;
                    img.save(dir.join(format!("{name}.png")))?;
                }
                println!("slices written to {}", dir.display());
            }
            Ok(())
        }
        Command::Evaluate { checkpoint, scenes, report, config } => {
            let (model, anchors) = load_checkpoint(&checkpoint)?;
            let cfg = match config {
                Some(p) => load_config(&p)?,
                None => PipelineConfig::default(),
            };
            let pool = ScenePool::load_dir(&scenes)?;
            let metrics = evaluate(&model, &anchors, &pool, &cfg.infer, &cfg.eval.bins())?;
            let json = serde_json::to_string_pretty(&metrics)?;
            std::fs::write(&report, &json)?;
            print_metrics_table(&metrics);
            println!("report written to {}", report.display());
            Ok(())
        }
        Command::MakeData { config, count, out } => {
            let cfg = load_config(&config)?;
            let pool = ScenePool::generate(&cfg.scene, count, cfg.scene.seed)?;
            pool.save_dir(&out)?;
            println!("{count} scenes written to {}", out.display());
            Ok(())
        }
        Command::Anchors { scenes, k, out, seed } => {
            let pool = ScenePool::load_dir(&scenes)?;
            let sizes: Vec<[f64; 3]> = pool
                .entries
                .iter()
                .flat_map(|e| {
                    e.scene
                        .gt
                        .iter()
                        .map(|g| [g.dims[0] as f64, g.dims[1] as f64, g.dims[2] as f64])
                })
                .collect();
            let voxel_size = pool.entries[0].scene.voxel_size;
            let set = cluster_anchors(&sizes, k, seed, voxel_size)?;
            std::fs::write(&out, serde_json::to_string_pretty(&set)?)?;
            println!(
                "{} small + {} big anchors written to {}",
                set.n_small(),
                set.n_big(),
                out.display()
            );
            Ok(())
        }
    }
}

fn print_metrics_table(m: &pipeline::MetricsReport) {
    println!("task          mAP@0.5   per-class");
    for (name, task) in [
        ("completion", &m.completion),
        ("segmentation", &m.segmentation),
        ("detection", &m.detection),
    ] {
        let per: Vec<String> =
            task.per_class.iter().map(|(k, v)| format!("{k}={v:.3}")).collect();
        println!("{name:<13} {:>7.4}   {}", task.map, per.join("  "));
    }
    for bin in &m.completeness_bins {
        match bin.map {
            Some(v) => println!(
                "completeness [{:.2},{:.2}]  n={:<3}  mAP {:.4}",
                bin.lo, bin.hi, bin.n_gt, v
            ),
            None => println!("completeness [{:.2},{:.2}]  n=0    (absent)", bin.lo, bin.hi),
        }
    }
}
