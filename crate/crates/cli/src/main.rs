//! Command-line entry point: data generation, training, evaluation, error
//! analysis and gradient checks. Every artifact lands under `--out`.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use hce::config::RunConfig;
use hce::detector::checkpoint::{config_hash, Checkpoint};
use hce::detector::{context_parameter_count, Detector, Trainer};
use hce::eval::{compute_ap, error_breakdown, render_breakdown, EvalDetection};
use hce::gradcheck::{run_gradcheck, TOLERANCE};
use hce::nn::Params;
use hce::par::Exec;
use hce::run::{evaluate, ground_truth, train_epoch, LogRecord};
use hce::synth::{category_name, write_dataset, Dataset, WriteStatus};
use hce::Bbox;
use log::info;
use serde_json::json;

#[derive(Parser)]
#[command(name = "hce", version, about = "Two-stage detector with hierarchical context embedding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Config file or preset name (e.g. `table2_row4`).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed of the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Writes the train and val splits.
    GenData(Common),
    /// Trains a detector, resuming from the last checkpoint when present.
    Train(Common),
    /// Runs inference on the val split and scores it.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out>/checkpoints/final.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Error breakdown of a detections file.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out>/detections.json`.
        #[arg(long)]
        detections: Option<PathBuf>,
    },
    /// Finite-difference checks of every learnable op.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Corrupts the analytic gradient of this op.
        #[arg(long)]
        fault: Option<String>,
    },
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let cfg = match &c.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    Ok(cfg)
}

fn data_root(cfg: &RunConfig, out: &Path) -> PathBuf {
    if cfg.data_dir.is_absolute() {
        cfg.data_dir.clone()
    } else {
        out.join(&cfg.data_dir)
    }
}

fn load_split(cfg: &RunConfig, out: &Path, split: &str) -> Result<Dataset> {
    let root = data_root(cfg, out);
    let data = Dataset::load(&root, split, Exec::default())
        .with_context(|| format!("split `{split}` not found under {}; run `hce gen-data` first", root.display()))?;
    if data.manifest.config != cfg.scene {
        bail!(
            "split `{split}` under {} was generated with a different scene config; regenerate it or use another --out",
            root.display()
        );
    }
    Ok(data)
}

fn cmd_gen_data(c: &Common) -> Result<()> {
    let mut cfg = load_config(c)?;
    if let Some(s) = c.seed {
        cfg.scene.seed = s;
    }
    let root = data_root(&cfg, &c.out);
    for (split, n) in [(&cfg.train_split, cfg.n_train), (&cfg.val_split, cfg.n_val)] {
        let (manifest, status) = write_dataset(&cfg.scene, n, split, &root, Exec::default())?;
        match status {
            WriteStatus::Written => println!("{split}: wrote {n} images (hash {})", &manifest.config_hash[..12]),
            WriteStatus::UpToDate => println!("{split}: up to date (hash {})", &manifest.config_hash[..12]),
        }
    }
    Ok(())
}

fn train_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = load_config(c)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Keeps only log lines written before `step`, so a resumed run appends
/// without duplicates.
fn truncate_log(path: &Path, step: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let kept: Vec<String> = BufReader::new(File::open(path)?)
        .lines()
        .map_while(std::io::Result::ok)
        .filter(|l| serde_json::from_str::<LogRecord>(l).is_ok_and(|r| r.step < step))
        .collect();
    let mut f = File::create(path)?;
    for l in kept {
        writeln!(f, "{l}")?;
    }
    Ok(())
}

fn cmd_train(c: &Common) -> Result<()> {
    let cfg = train_config(c)?;
    let hash = config_hash(&cfg);
    let ckpt_dir = c.out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    let final_path = ckpt_dir.join("final.ckpt");
    let last_path = ckpt_dir.join("last.ckpt");
    let log_path = c.out.join("train_log.jsonl");

    let check_hash = |ck: &Checkpoint, p: &Path| -> Result<()> {
        if ck.config_hash != hash {
            bail!("{} was trained with a different config; pick another --out or delete it", p.display());
        }
        Ok(())
    };
    if final_path.exists() {
        let ck = Checkpoint::load(&final_path)?;
        check_hash(&ck, &final_path)?;
        println!("training up to date: {}", final_path.display());
        return Ok(());
    }

    let data = load_split(&cfg, &c.out, &cfg.train_split)?;
    let samples: Vec<_> = data.images.iter().map(|im| im.to_sample()).collect();
    let (mut trainer, start_epoch) = if last_path.exists() {
        let ck = Checkpoint::load(&last_path)?;
        check_hash(&ck, &last_path)?;
        println!("resuming at epoch {} step {}", ck.epoch, ck.trainer.step);
        (ck.trainer, ck.epoch)
    } else {
        (Trainer::new(Detector::new(cfg.model.clone(), cfg.seed)?, cfg.trainer_config()), 0)
    };
    truncate_log(&log_path, trainer.step)?;
    let total = trainer.model.num_params();
    let ctx = context_parameter_count(&cfg.model);
    println!("parameters: {total} total, {ctx} in context modules, {} baseline", total - ctx);

    fs::write(c.out.join("resolved.cfg"), cfg.to_text())?;
    let mut log = BufWriter::new(OpenOptions::new().create(true).append(true).open(&log_path)?);
    for epoch in start_epoch..cfg.epochs {
        let mut io_err = None;
        train_epoch(&mut trainer, &samples, epoch, &mut |_, rec| {
            let line = serde_json::to_string(rec).expect("log record serialises");
            if let Err(e) = writeln!(log, "{line}") {
                io_err.get_or_insert(e);
            }
            if rec.step % 50 == 0 {
                info!(
                    "step {} L_feat {:.4} L_conf {:.4} L_mll {:.4} L_rpn {:.4} lr {:.5}",
                    rec.step, rec.l_feat, rec.l_conf, rec.l_mll, rec.l_rpn, rec.lr
                );
            }
        })
        .with_context(|| format!("training aborted in epoch {epoch} at step {}", trainer.step))?;
        if let Some(e) = io_err {
            return Err(e).context("writing training log");
        }
        log.flush()?;
        let ck = Checkpoint {
            trainer: trainer.clone(),
            epoch: epoch + 1,
            config_hash: hash.clone(),
        };
        let every = cfg.checkpoint_every.max(1);
        if (epoch + 1) % every == 0 {
            ck.save(&ckpt_dir.join(format!("epoch_{:03}.ckpt", epoch + 1)))?;
        }
        ck.save(&last_path)?;
        println!("epoch {}/{} done, step {}", epoch + 1, cfg.epochs, trainer.step);
    }
    fs::copy(&last_path, &final_path)?;
    println!("final checkpoint: {}", final_path.display());
    Ok(())
}

fn cmd_eval(c: &Common, checkpoint: Option<&Path>) -> Result<()> {
    let cfg = train_config(c)?;
    let path = checkpoint.map_or_else(|| c.out.join("checkpoints/final.ckpt"), Path::to_path_buf);
    if !path.exists() {
        bail!("checkpoint {} does not exist; run `hce train` first", path.display());
    }
    let ck = Checkpoint::load(&path)?;
    let data = load_split(&cfg, &c.out, &cfg.val_split)?;
    let mut model = ck.trainer.model;
    model.config.test = cfg.model.test;
    let rep = evaluate(&model, &data, cfg.test, &cfg.eval, Exec::default())?;

    let dets: Vec<_> = rep
        .detections
        .iter()
        .enumerate()
        .flat_map(|(i, ds)| {
            let id = data.coco.images[i].id;
            ds.iter().map(move |d| {
                json!({
                    "image_id": id,
                    "category_id": d.category,
                    "bbox": d.bbox.to_xywh(),
                    "score": d.score,
                    "branch": d.branch,
                })
            })
        })
        .collect();
    fs::create_dir_all(&c.out)?;
    fs::write(c.out.join("detections.json"), serde_json::to_string(&dets)?)?;
    let m = rep.metrics;
    let metrics = json!({
        "AP": m.ap, "AP50": m.ap50, "AP75": m.ap75, "APS": m.aps, "APM": m.apm, "APL": m.apl,
        "ff_test": cfg.test.use_ff, "cf_test": cfg.test.use_cf,
        "time_per_image_s": rep.time_per_image.as_secs_f64(),
        "checkpoint": path.display().to_string(),
    });
    fs::write(c.out.join("metrics.json"), serde_json::to_string_pretty(&metrics)?)?;
    println!(
        "AP {:.2} AP50 {:.2} AP75 {:.2} APS {:.2} APM {:.2} APL {:.2} time/image {:.2} ms",
        100.0 * m.ap,
        100.0 * m.ap50,
        100.0 * m.ap75,
        100.0 * m.aps,
        100.0 * m.apm,
        100.0 * m.apl,
        1e3 * rep.time_per_image.as_secs_f64()
    );
    Ok(())
}

fn read_detections(path: &Path, data: &Dataset) -> Result<Vec<EvalDetection>> {
    let raw: Vec<serde_json::Value> = serde_json::from_str(&fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?)?;
    let index: std::collections::HashMap<u64, usize> = data.coco.images.iter().enumerate().map(|(i, im)| (im.id, i)).collect();
    let c = data.config().num_classes;
    raw.iter()
        .enumerate()
        .map(|(k, v)| {
            let id = v["image_id"].as_u64().with_context(|| format!("detection {k}: missing image_id"))?;
            let &i = index.get(&id).with_context(|| format!("detection {k}: image_id {id} is not in the dataset"))?;
            let category = v["category_id"].as_u64().with_context(|| format!("detection {k}: missing category_id"))? as usize;
            if category >= c {
                bail!("detection {k}: category_id {category} out of range for {c} classes");
            }
            let b: [f64; 4] = serde_json::from_value(v["bbox"].clone()).with_context(|| format!("detection {k}: bad bbox"))?;
            Ok(EvalDetection {
                image_id: i as u64,
                category,
                bbox: Bbox::from_xywh(b)?,
                score: v["score"].as_f64().with_context(|| format!("detection {k}: missing score"))?,
            })
        })
        .collect()
}

fn cmd_analyze(c: &Common, detections: Option<&Path>) -> Result<()> {
    let cfg = load_config(c)?;
    let path = detections.map_or_else(|| c.out.join("detections.json"), Path::to_path_buf);
    let data = load_split(&cfg, &c.out, &cfg.val_split)?;
    let dets = read_detections(&path, &data)?;
    let gt = ground_truth(&data);
    let b = error_breakdown(&dets, &gt, cfg.scene.num_classes);
    let scene = cfg.scene.clone();
    let names = move |k: usize| category_name(&scene, k);
    render_breakdown(&b, &names, &c.out)?;
    let ids: Vec<u64> = (0..data.images.len() as u64).collect();
    let ap = compute_ap(&dets, &gt, &ids, &cfg.eval)?;
    println!("AP {:.2}; breakdown written to {}", 100.0 * ap.ap, c.out.join("breakdown.csv").display());
    Ok(())
}

fn cmd_gradcheck(c: &Common, fault: Option<&str>) -> Result<bool> {
    let reports = run_gradcheck(c.seed.unwrap_or(0), fault)?;
    let mut ok = true;
    println!("{:<32} {:>12} {:>8}", "op", "max rel err", "status");
    for r in &reports {
        ok &= r.passed;
        println!("{:<32} {:>12.3e} {:>8}", r.op, r.max_rel_error, if r.passed { "ok" } else { "FAIL" });
    }
    fs::create_dir_all(&c.out)?;
    fs::write(c.out.join("gradcheck.json"), serde_json::to_string_pretty(&reports)?)?;
    println!("tolerance {TOLERANCE:e}: {}", if ok { "all ops pass" } else { "FAILED" });
    Ok(ok)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(c) => cmd_gen_data(c).map(|_| true),
        Command::Train(c) => cmd_train(c).map(|_| true),
        Command::Eval { common, checkpoint } => cmd_eval(common, checkpoint.as_deref()).map(|_| true),
        Command::Analyze { common, detections } => cmd_analyze(common, detections.as_deref()).map(|_| true),
        Command::Gradcheck { common, fault } => cmd_gradcheck(common, fault.as_deref()),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
