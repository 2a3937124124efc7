use std::cell::RefCell;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use brivl_core::checkpoint::{generator_checkpoint, restore_generator, restore_trainer, trainer_checkpoint, Checkpoint};
use brivl_core::contrastive::{Trainer, TrainingSet};
use brivl_core::datagen::{dataset_bytes, read_dataset, PairDataset, Split};
use brivl_core::encoders::ImageBatch;
use brivl_core::evaluation::topk_text_neighbors;
use brivl_core::gradcheck::{format_table, run_all, TOLERANCE};
use brivl_core::imagination::{generate_from_text, to_ppm, visualize_text, Frozen, GenerateConfig, Imagined, ToyGenerator};
use brivl_core::pipeline::{self, METRICS_HEADER, SHAPE_PROBE_COUNT, SHAPE_PROBE_SEED};
use brivl_core::{Error, Result, RunConfig};
use log::{debug, info};

use crate::{Command, ConfigArgs, Mode, Task};

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";

/// Sizes the global worker pool from `BRIVL_THREADS` when set.
pub fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("BRIVL_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("BRIVL_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot size the worker pool: {e}")))
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Datagen {
            seed,
            size,
            test,
            image_size,
            out,
        } => datagen(seed, size, test, image_size, &out),
        Command::Pretrain {
            config,
            data,
            out,
            resume,
        } => pretrain(&config, &data, &out, resume),
        Command::Eval {
            checkpoint,
            data,
            task,
            out,
            query,
            k,
        } => eval(&checkpoint, &data, task, out.as_deref(), query.as_deref(), k),
        Command::Imagine {
            checkpoint,
            text,
            mode,
            generator,
            neuron,
            alpha,
            iters,
            lr,
            seed,
            out,
        } => imagine(ImagineArgs {
            checkpoint,
            text,
            mode,
            generator,
            neuron,
            alpha,
            iters,
            lr,
            seed,
            out,
        }),
        Command::TrainGenerator { config, data, out } => train_generator(&config, &data, &out),
        Command::Gradcheck { seed } => gradcheck(seed),
        Command::Config { config, print_defaults } => {
            if print_defaults {
                print!("{}", RunConfig::defaults_documentation());
            } else {
                print!("{}", load_config(&config)?.to_text());
            }
            Ok(())
        }
    }
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)?,
        None => RunConfig::default(),
    };
    for o in &args.overrides {
        cfg.apply_override(o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn datagen(seed: u64, size: usize, test: Option<usize>, image_size: usize, out: &Path) -> Result<()> {
    if size == 0 {
        return Err(Error::Usage("--size must be at least 1".into()));
    }
    if !(8..=1024).contains(&image_size) {
        return Err(Error::Usage(format!("--image-size {image_size} is outside 8..=1024")));
    }
    let test = test.unwrap_or(size / 10);
    let start = Instant::now();
    let ds = PairDataset::generate(seed, size, test, image_size);
    let bytes = dataset_bytes(&ds)?;
    fs::write(out, &bytes).map_err(|e| Error::io(out, e))?;
    info!("wrote {} in {:.1}s", out.display(), start.elapsed().as_secs_f64());
    println!("records={} crc32={:08x}", ds.len(), crc32fast::hash(&bytes));
    Ok(())
}

fn read_matching_dataset(path: &Path, cfg: &RunConfig) -> Result<PairDataset> {
    let ds = read_dataset(path)?;
    if ds.image_size != cfg.encoder.image_size {
        return Err(Error::Config(format!(
            "dataset images are {0}x{0} but image_size is {1}",
            ds.image_size, cfg.encoder.image_size
        )));
    }
    Ok(ds)
}

/// Keeps the header and the rows of steps before `step`.
fn truncate_metrics(path: &Path, step: u64) -> Result<()> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut kept = String::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let keep = i == 0
            || line
                .split(',')
                .next()
                .and_then(|s| s.parse::<u64>().ok())
                .is_some_and(|s| s < step);
        if keep {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

fn pretrain(args: &ConfigArgs, data: &Path, out: &Path, resume: bool) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let metrics_path = out.join(METRICS_FILE);
    let (cfg, mut trainer) = if resume {
        let (saved, trainer) = restore_trainer(&Checkpoint::load(&ckpt_path)?)?;
        if args.config.is_some() || !args.overrides.is_empty() {
            let requested = load_config(args)?;
            if requested != saved {
                return Err(Error::Config(
                    "the requested configuration differs from the one stored in the checkpoint".into(),
                ));
            }
        }
        truncate_metrics(&metrics_path, trainer.state.step)?;
        (saved, trainer)
    } else {
        let cfg = load_config(args)?;
        let trainer = Trainer::new(&cfg.encoder, &cfg.trainer)?;
        fs::write(&metrics_path, format!("{METRICS_HEADER}\n")).map_err(|e| Error::io(&metrics_path, e))?;
        (cfg, trainer)
    };
    let ds = read_matching_dataset(data, &cfg)?;
    let set = TrainingSet::train_split(&ds, &trainer.towers.vocab, cfg.encoder.max_text_len)?;
    let total = trainer.total_steps(set.len())?;
    if trainer.state.step >= total {
        info!("training already complete at step {}", trainer.state.step);
        println!("steps_taken=0 step={}", trainer.state.step);
        return Ok(());
    }
    info!(
        "training {} pairs for {} epochs ({total} steps, {} warm-up) from step {}",
        set.len(),
        cfg.trainer.epochs,
        cfg.trainer.warmup_steps(),
        trainer.state.step
    );
    let file = fs::OpenOptions::new()
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    let log_out = RefCell::new((BufWriter::new(file), None::<f64>));
    let start = Instant::now();
    let taken = pipeline::train(
        &mut trainer,
        &set,
        |m| {
            if let Some(line) = m.log_line() {
                let mut log = log_out.borrow_mut();
                writeln!(log.0, "{line}").map_err(|e| Error::io(&metrics_path, e))?;
                debug!("{line}");
                log.1 = m.loss.map(|l| l.total);
            }
            Ok(())
        },
        |t, epoch| {
            let mut log = log_out.borrow_mut();
            log.0.flush().map_err(|e| Error::io(&metrics_path, e))?;
            trainer_checkpoint(&cfg, t).save(&ckpt_path)?;
            info!(
                "epoch {epoch}/{} done at step {}, loss {}, {:.0}s",
                cfg.trainer.epochs,
                t.state.step,
                log.1.map_or("n/a".into(), |l| format!("{l:.4}")),
                start.elapsed().as_secs_f64()
            );
            Ok(())
        },
    )?;
    log_out.borrow_mut().0.flush().map_err(|e| Error::io(&metrics_path, e))?;
    println!("steps_taken={taken} step={}", trainer.state.step);
    Ok(())
}

fn load_model(path: &Path) -> Result<(RunConfig, Trainer)> {
    restore_trainer(&Checkpoint::load(path)?)
}

fn write_report(dir: Option<&Path>, name: &str, body: &str) -> Result<()> {
    if let Some(dir) = dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        info!("wrote {}", path.display());
    }
    Ok(())
}

fn eval(checkpoint: &Path, data: &Path, task: Task, out: Option<&Path>, query: Option<&str>, k: usize) -> Result<()> {
    let (cfg, t) = load_model(checkpoint)?;
    let s = &t.state;
    match task {
        Task::Retrieval => {
            let ds = read_matching_dataset(data, &cfg)?;
            let r = pipeline::held_out_retrieval(&t.towers, &s.image, &s.text, &ds)?;
            info!("\n{}", r.to_text());
            write_report(out, "retrieval.txt", &r.to_key_values())?;
            print!("{}", r.to_key_values());
        }
        Task::Zeroshot => {
            let r = pipeline::zero_shot_shapes(&t.towers, &s.image, &s.text, SHAPE_PROBE_SEED, SHAPE_PROBE_COUNT)?;
            info!("\n{}", r.to_text());
            write_report(out, "zeroshot.txt", &r.to_key_values())?;
            print!("{}", r.to_key_values());
        }
        Task::Neighbors => {
            let query = query.ok_or_else(|| Error::Usage("--task neighbors needs --query".into()))?;
            let ds = read_matching_dataset(data, &cfg)?;
            let mut texts: Vec<&str> = ds.split(Split::Test).iter().map(|r| r.text.as_str()).collect();
            texts.sort_unstable();
            texts.dedup();
            if k == 0 || k > texts.len() {
                return Err(Error::Usage(format!("--k must lie in 1..={}", texts.len())));
            }
            let hits = topk_text_neighbors(query, &texts, k, &t.towers, &s.text)?;
            let mut body = String::from("rank,cosine,text\n");
            for (rank, (i, c)) in hits.iter().enumerate() {
                body.push_str(&format!("{},{c:.6},{}\n", rank + 1, texts[*i]));
            }
            write_report(out, "neighbors.csv", &body)?;
            print!("{body}");
        }
    }
    Ok(())
}

struct ImagineArgs {
    checkpoint: PathBuf,
    text: String,
    mode: Mode,
    generator: Option<PathBuf>,
    neuron: Option<usize>,
    alpha: f64,
    iters: Option<usize>,
    lr: Option<f64>,
    seed: Option<u64>,
    out: PathBuf,
}

fn imagine(a: ImagineArgs) -> Result<()> {
    let (cfg, t) = load_model(&a.checkpoint)?;
    let model = Frozen::new(&t.towers, &t.state.image, &t.state.text, t.state.step)?;
    let side = cfg.encoder.image_size;
    let result: Imagined = match a.mode {
        Mode::Visualize => {
            let mut vis = cfg.vis.clone();
            if let Some(n) = a.neuron {
                let channels = t.towers.image.llp_channels();
                if n >= channels {
                    return Err(Error::Usage(format!("--neuron must be below {channels}")));
                }
                vis.neuron = Some((n, a.alpha));
            }
            vis.max_iterations = a.iters.unwrap_or(vis.max_iterations);
            vis.lr = a.lr.unwrap_or(vis.lr);
            vis.seed = a.seed.unwrap_or(vis.seed);
            if !(vis.lr > 0.0) {
                return Err(Error::Usage("--lr must be positive".into()));
            }
            visualize_text(model, &a.text, &vis)?
        }
        Mode::Generate => {
            if a.neuron.is_some() {
                return Err(Error::Usage("--neuron applies to --mode visualize only".into()));
            }
            let path = a
                .generator
                .as_ref()
                .ok_or_else(|| Error::Usage("--mode generate needs --generator".into()))?;
            let (_, g) = restore_generator(&Checkpoint::load(path)?)?;
            let gen = GenerateConfig {
                iterations: a.iters.unwrap_or(cfg.gen_iterations),
                lr: a.lr.unwrap_or(cfg.gen_lr),
                seed: a.seed.unwrap_or(cfg.vis.seed),
            };
            generate_from_text(model, &g, &g.codebook(), &a.text, &gen)?.imagined
        }
    };
    fs::write(&a.out, to_ppm(&result.image, side)?).map_err(|e| Error::io(&a.out, e))?;
    let mut trace_path = a.out.clone().into_os_string();
    trace_path.push(".trace.csv");
    let trace_path = PathBuf::from(trace_path);
    fs::write(&trace_path, format!("iteration,cosine\n{}", result.trace_text()))
        .map_err(|e| Error::io(&trace_path, e))?;
    println!(
        "initial_cosine={:.6} final_cosine={:.6}",
        result.initial_cosine(),
        result.final_cosine()
    );
    Ok(())
}

fn train_generator(args: &ConfigArgs, data: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(args)?;
    let ds = read_matching_dataset(data, &cfg)?;
    let side = cfg.encoder.image_size;
    let images: Vec<Vec<f32>> = ds.split(Split::Train).iter().map(|r| r.image_chw(side)).collect();
    let mut g = ToyGenerator::new(&cfg.generator, side)?;
    let start = Instant::now();
    let report = g.train(&images)?;
    info!(
        "generator trained in {:.0}s, loss {:.4} -> {:.4}, {} code restarts",
        start.elapsed().as_secs_f64(),
        report.losses.first().copied().unwrap_or(f64::NAN),
        report.losses.last().copied().unwrap_or(f64::NAN),
        report.restarts
    );
    generator_checkpoint(&cfg, &g).save(out)?;
    let held_out: Vec<Vec<f32>> = ds.split(Split::Test).iter().map(|r| r.image_chw(side)).collect();
    if held_out.is_empty() {
        println!("held_out=0");
    } else {
        let (mse, usage) = g.evaluate(&ImageBatch::from_chw(&held_out, side)?)?;
        println!("recon_mse={mse:.6} codebook_usage={usage:.4}");
    }
    Ok(())
}

fn gradcheck(seed: u64) -> Result<()> {
    let reports = run_all(&RunConfig::default().encoder, seed)?;
    print!("{}", format_table(&reports, TOLERANCE));
    let failed = reports.iter().filter(|r| !r.passed(TOLERANCE)).count();
    if failed > 0 {
        return Err(Error::Numerical(format!("{failed} of {} gradient checks failed", reports.len())));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncation_keeps_header_and_earlier_steps() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(METRICS_FILE);
        fs::write(&path, format!("{METRICS_HEADER}\n2,1.0,0.5,0.5,8\n3,0.9,0.4,0.5,16\n4,0.8,0.4,0.4,24\n")).unwrap();
        truncate_metrics(&path, 4).unwrap();
        assert_eq!(
            fs::read_to_string(&path).unwrap(),
            format!("{METRICS_HEADER}\n2,1.0,0.5,0.5,8\n3,0.9,0.4,0.5,16\n")
        );
    }
}
