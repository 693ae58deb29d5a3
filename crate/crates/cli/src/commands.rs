use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use log::info;
use mtsgait::backbone::{flops_estimate, Model};
use mtsgait::data::{
    load_sequences, read_embeddings, scan, split, synth_generate, write_embeddings, EmbedFormat, Split, SynthConfig,
};
use mtsgait::retrieval::{evaluate, Metric};
use mtsgait::sampling::{SamplerConfig, Strategy, INFERENCE_FRAME_CAP};
use mtsgait::trainer::{final_checkpoint, train as run_training, OptimState, TrainSetup};
use mtsgait::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{RunConfig, ECHO_FILE};

/// A failed command: its exit code class and a one-line message.
#[derive(Debug)]
pub struct Failure {
    kind: &'static str,
    code: u8,
    msg: String,
}

impl Failure {
    pub fn usage(msg: impl Into<String>) -> Self {
        let msg = msg.into();
        let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
        Failure {
            kind: "usage",
            code: 2,
            msg: first,
        }
    }

    /// Prints `error: kind=<kind> code=<n> msg="<text>"` to stderr.
    pub fn report(&self) -> ExitCode {
        eprintln!("error: kind={} code={} msg={:?}", self.kind, self.code, self.msg);
        ExitCode::from(self.code)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let (kind, code) = match &e {
            Error::Io { .. } => ("io", 3),
            Error::Config(_) => ("config", 4),
            Error::Protocol(_) => ("protocol", 5),
            Error::Format { .. } => ("format", 6),
            Error::Diverged { .. } => ("divergence", 7),
            Error::Shape { .. } | Error::NotScalar(_) => ("internal", 1),
        };
        Failure {
            kind,
            code,
            msg: e.to_string(),
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Error::Io {
        path: path.into(),
        source: e,
    }
    .into()
}

/// Builds the global worker pool from `MTSGAIT_THREADS`, else `--threads`.
pub fn init_threads(flag: Option<usize>) -> Outcome {
    let threads = match std::env::var("MTSGAIT_THREADS") {
        Ok(v) => Some(
            v.trim()
                .parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| Failure::from(Error::Config(format!("MTSGAIT_THREADS must be a positive integer, got {v:?}"))))?,
        ),
        Err(_) => flag,
    };
    if let Some(n) = threads {
        if n == 0 {
            return Err(Error::Config("--threads must be positive".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::from(Error::Config(format!("cannot start {n} worker threads: {e}"))))?;
    }
    Ok(())
}

pub fn synth(subjects: usize, seqs: usize, frames: usize, min_frames: Option<usize>, seed: u64, out: &Path) -> Outcome {
    let cfg = SynthConfig {
        subjects,
        seqs_per_subject: seqs,
        frames,
        min_frames,
        seed,
    };
    let n = synth_generate(&cfg, out)?;
    println!("wrote {n} frames for {subjects} subjects to {}", out.display());
    Ok(())
}

fn load_config(path: Option<&Path>) -> std::result::Result<RunConfig, Failure> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::parse("")?,
    })
}

pub fn train(config: Option<&Path>, data: &Path, out: &Path, seed: Option<u64>, resume: Option<&Path>) -> Outcome {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.preset.seed = s;
    }
    let index = scan(data)?;
    let items = split(&index, cfg.data.protocol, Split::Train)?;
    let seqs = load_sequences(&index, &items, INFERENCE_FRAME_CAP)?;
    let classes = seqs.iter().map(|s| s.label + 1).max().unwrap_or(0);
    let head = &mut cfg.model.head;
    if head.include_classifier {
        if head.num_classes == 0 {
            head.num_classes = classes;
        } else if head.num_classes != classes {
            return Err(Error::Config(format!(
                "model.head.num_classes is {} but the training split has {classes} subjects",
                head.num_classes
            ))
            .into());
        }
    }
    info!(
        "training on {} sequences of {classes} subjects ({} frames skipped)",
        seqs.len(),
        index.skipped_files
    );
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let echo = out.join(ECHO_FILE);
    fs::write(&echo, cfg.to_toml()).map_err(|e| io_err(&echo, e))?;

    let model_cfg = cfg.model_config();
    let (mut model, state, start) = match resume {
        Some(path) => {
            let (model, extra) = Model::load(model_cfg, path)?;
            let (state, start) = OptimState::from_entries(&model, &extra, path)?;
            info!("resuming at iteration {start}");
            (model, state, start)
        }
        None => {
            let model = Model::build(model_cfg, cfg.preset.seed)?;
            let state = OptimState::new(&model);
            (model, state, 0)
        }
    };
    let setup = TrainSetup {
        train: cfg.train.clone(),
        sampler: cfg.sampler.clone(),
        batch: cfg.batch,
        loss: cfg.loss,
        seed: cfg.preset.seed,
        out_dir: Some(out.to_path_buf()),
    };
    let summary = run_training(&mut model, &seqs, &setup, state, start)?;
    let last = summary.curve.last().map_or(f64::NAN, |r| r.total);
    println!(
        "trained {} iterations, final loss {last:.6}, checkpoint {}",
        cfg.train.iterations,
        final_checkpoint(out).display()
    );
    Ok(())
}

/// Checkpoint file and its config from a run directory or checkpoint path.
fn resolve_checkpoint(ckpt: &Path) -> std::result::Result<(PathBuf, RunConfig), Failure> {
    let (file, dir) = if ckpt.is_dir() {
        (final_checkpoint(ckpt), ckpt.to_path_buf())
    } else {
        let dir = ckpt.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf);
        (ckpt.to_path_buf(), dir)
    };
    let cfg = RunConfig::load(&dir.join(ECHO_FILE))?;
    Ok((file, cfg))
}

pub fn extract(ckpt: &Path, data: &Path, which: Split, out: &Path) -> Outcome {
    let (file, cfg) = resolve_checkpoint(ckpt)?;
    let (model, _) = Model::load(cfg.model_config(), &file)?;
    let index = scan(data)?;
    let items = split(&index, cfg.data.protocol, which)?;
    let seqs = load_sequences(&index, &items, INFERENCE_FRAME_CAP)?;
    let set = model.embed_all(&seqs)?;
    write_embeddings(out, &set, EmbedFormat::from_path(out))?;
    println!("wrote {} embeddings of {}x{} to {}", set.len(), set.strips, set.dim, out.display());
    Ok(())
}

pub fn eval(probe: &Path, gallery: &Path, metric: Metric, ks: &[usize], out: Option<&Path>, leave_one_out: bool) -> Outcome {
    let p = read_embeddings(probe)?;
    let g = read_embeddings(gallery)?;
    if !leave_one_out {
        let gallery_ids: HashSet<_> = g.ids.iter().collect();
        let shared = p.ids.iter().filter(|id| gallery_ids.contains(id)).count();
        if let Some(first) = p.ids.iter().find(|id| gallery_ids.contains(id)) {
            return Err(Error::Protocol(format!(
                "{shared} probe sequences (first {first}) also appear in the gallery; pass --leave-one-out to allow this"
            ))
            .into());
        }
    }
    let report = evaluate(&p, &g, metric, ks)?;
    print!("{}", report.to_table());
    if report.zero_norm > 0 {
        log::warn!("{} embeddings have zero norm; their cosine distances are 1", report.zero_norm);
    }
    if let Some(path) = out {
        fs::write(path, report.to_csv()).map_err(|e| io_err(path, e))?;
    }
    Ok(())
}

pub fn bench(config: Option<&Path>) -> Outcome {
    let cfg = load_config(config)?;
    let model_cfg = cfg.model_config();
    let model = Model::build(model_cfg.clone(), 0)?;
    let spatial = Model::build(model_cfg.spatial_only(), 0)?;
    println!("{:<32} {:>16} {:>10}", "parameter", "shape", "count");
    for p in model.params.iter() {
        println!("{:<32} {:>16} {:>10}", p.name, format!("{:?}", p.tensor.shape()), p.numel());
    }
    let same = model
        .params
        .iter()
        .zip(spatial.params.iter())
        .all(|(a, b)| a.name == b.name && a.tensor.shape() == b.tensor.shape())
        && model.params.len() == spatial.params.len();
    println!(
        "total parameters: {} (spatial-only: {}, {})",
        model.count_parameters(),
        spatial.count_parameters(),
        if same { "identical table" } else { "tables differ" }
    );
    println!();
    print!("{}", flops_estimate(&model_cfg, true)?.to_table());
    Ok(())
}

pub fn sample_dump(strategy: Strategy, len: usize, n: usize, seed: u64) -> Outcome {
    if len == 0 {
        return Err(Error::Config("--len must be at least 1".into()).into());
    }
    let cfg = SamplerConfig { strategy, frames: n };
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx = cfg.sample(len, &mut rng);
    let text: Vec<String> = idx.iter().map(|i| (i + 1).to_string()).collect();
    println!("{}", text.join(","));
    Ok(())
}
