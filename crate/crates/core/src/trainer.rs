//! Optimizers, learning-rate schedule and the PK-batch training loop.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Model;
use crate::data::LoadedSequence;
use crate::error::{Error, Result};
use crate::loss::{batch_all_triplet, combine, cross_entropy, LossConfig};
use crate::sampling::{pk_batch, BatchSpec, SamplerConfig};
use crate::tensor::{backward, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainPreset {
    Desk,
    Gait3d,
    Grew,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Adam,
    SgdMomentum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub lr: f64,
    /// Iterations at which the learning rate is multiplied by `lr_gamma`.
    pub lr_milestones: Vec<usize>,
    pub lr_gamma: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    /// SGD momentum; ignored by Adam.
    pub momentum: f64,
    /// Periodic checkpoint interval in iterations; 0 disables.
    pub checkpoint_every: usize,
    /// Progress line interval in iterations; 0 disables.
    pub log_every: usize,
}

impl TrainConfig {
    pub fn preset(p: TrainPreset) -> Self {
        let (optimizer, lr, lr_milestones, iterations) = match p {
            TrainPreset::Desk => (Optimizer::Adam, 1e-3, vec![], 2_000),
            TrainPreset::Gait3d => (Optimizer::Adam, 1e-3, vec![30_000, 90_000], 180_000),
            TrainPreset::Grew => (Optimizer::SgdMomentum, 1e-2, vec![150_000, 250_000], 300_000),
        };
        TrainConfig {
            optimizer,
            lr,
            lr_milestones,
            lr_gamma: 0.1,
            weight_decay: 5e-4,
            iterations,
            momentum: 0.9,
            checkpoint_every: if p == TrainPreset::Desk { 0 } else { 10_000 },
            log_every: 100,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.lr_gamma > 0.0 && (0.0..1.0).contains(&self.momentum)) {
            return Err(Error::Config(
                "weight_decay >= 0, lr_gamma > 0 and momentum in [0, 1) are required".into(),
            ));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        let m = &self.lr_milestones;
        if m.windows(2).any(|w| w[0] >= w[1]) || m.last().is_some_and(|&l| l >= self.iterations) {
            return Err(Error::Config(format!(
                "lr milestones {m:?} must be strictly increasing and below {} iterations",
                self.iterations
            )));
        }
        Ok(())
    }

    /// Learning rate for zero-based `iteration`: decayed once per milestone reached.
    pub fn lr_at(&self, iteration: usize) -> f64 {
        let passed = self.lr_milestones.iter().filter(|&&m| iteration >= m).count();
        self.lr * self.lr_gamma.powi(passed as i32)
    }
}

pub const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
pub const ADAM_EPS: f64 = 1e-8;

/// Per-parameter optimizer moments. For SGD only `m` (the velocity) is used.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl OptimState {
    pub fn new(model: &Model) -> Self {
        let zeros: Vec<Vec<f32>> = model.params.iter().map(|p| vec![0.0; p.numel()]).collect();
        OptimState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    fn entries(&self, model: &Model, iteration: usize) -> Vec<(String, Tensor<f32>)> {
        let mut out = vec![
            ("optim.step".to_string(), Tensor::scalar(self.step as f32)),
            ("train.iteration".to_string(), Tensor::scalar(iteration as f32)),
        ];
        for ((p, m), v) in model.params.iter().zip(&self.m).zip(&self.v) {
            let shape = p.tensor.shape().to_vec();
            out.push((format!("optim.m.{}", p.name), Tensor::new(shape.clone(), m.clone()).expect("shape")));
            out.push((format!("optim.v.{}", p.name), Tensor::new(shape, v.clone()).expect("shape")));
        }
        out
    }

    /// Restores the state and next iteration from checkpoint extras.
    pub fn from_entries(model: &Model, extra: &[(String, Tensor<f32>)], path: &Path) -> Result<(Self, usize)> {
        let find = |name: &str| {
            extra
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::format(path, format!("missing {name} for resume")))
        };
        let mut s = OptimState::new(model);
        s.step = find("optim.step")?.item() as u64;
        let iteration = find("train.iteration")?.item() as usize;
        for (i, p) in model.params.iter().enumerate() {
            s.m[i] = find(&format!("optim.m.{}", p.name))?.data().to_vec();
            s.v[i] = find(&format!("optim.v.{}", p.name))?.data().to_vec();
            if s.m[i].len() != p.numel() || s.v[i].len() != p.numel() {
                return Err(Error::format(path, format!("optimizer state for {} has wrong size", p.name)));
            }
        }
        Ok((s, iteration))
    }
}

fn decayed_grad(p: &crate::tensor::Parameter, wd: f64) -> Vec<f32> {
    let g = p.tensor.grad.clone().unwrap_or_else(|| vec![0.0; p.numel()]);
    if p.decay && wd != 0.0 {
        let wd = wd as f32;
        g.iter().zip(p.tensor.data()).map(|(&g, &w)| g + wd * w).collect()
    } else {
        g
    }
}

/// One Adam update from the accumulated gradients; weight decay enters as an
/// L2 term on parameters flagged for decay.
pub fn adam_step(model: &mut Model, state: &mut OptimState, lr: f64, wd: f64) {
    state.step += 1;
    let (b1, b2) = ADAM_BETAS;
    let bc1 = 1.0 - b1.powi(state.step as i32);
    let bc2 = 1.0 - b2.powi(state.step as i32);
    for (i, p) in model.params.iter_mut().enumerate() {
        let g = decayed_grad(p, wd);
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.tensor.data_mut().iter_mut().enumerate() {
            let gj = g[j] as f64;
            m[j] = (b1 * m[j] as f64 + (1.0 - b1) * gj) as f32;
            v[j] = (b2 * v[j] as f64 + (1.0 - b2) * gj * gj) as f32;
            let mh = m[j] as f64 / bc1;
            let vh = v[j] as f64 / bc2;
            *w = (*w as f64 - lr * mh / (vh.sqrt() + ADAM_EPS)) as f32;
        }
    }
}

/// Heavy-ball SGD: `buf = momentum * buf + g; w -= lr * buf`.
pub fn sgd_momentum_step(model: &mut Model, state: &mut OptimState, lr: f64, wd: f64, momentum: f64) {
    state.step += 1;
    let (lr, mu) = (lr as f32, momentum as f32);
    for (i, p) in model.params.iter_mut().enumerate() {
        let g = decayed_grad(p, wd);
        let buf = &mut state.m[i];
        for (j, w) in p.tensor.data_mut().iter_mut().enumerate() {
            buf[j] = mu * buf[j] + g[j];
            *w -= lr * buf[j];
        }
    }
}

/// A composed training batch: `labels.len()` sequences of `seq_len` frames.
#[derive(Debug, Clone)]
pub struct Batch {
    pub frames: Tensor<f32>,
    pub labels: Vec<usize>,
    pub seq_len: usize,
    pub ids: Vec<String>,
}

/// Sequence indices of `data` grouped by label.
pub fn group_by_label(data: &[LoadedSequence]) -> Vec<Vec<usize>> {
    let classes = data.iter().map(|s| s.label + 1).max().unwrap_or(0);
    let mut groups = vec![Vec::new(); classes];
    for (i, s) in data.iter().enumerate() {
        groups[s.label].push(i);
    }
    groups
}

/// Draws a PK batch and samples `sampler.frames` frames from every sequence.
pub fn compose_batch(
    data: &[LoadedSequence],
    groups: &[Vec<usize>],
    sampler: &SamplerConfig,
    spec: BatchSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    let counts: Vec<usize> = groups.iter().map(Vec::len).collect();
    let picks = pk_batch(&counts, spec, rng)?;
    let n = sampler.frames;
    let frame = data.first().map_or(0, |s| s.frame(0).len());
    let mut pixels = Vec::with_capacity(picks.len() * n * frame);
    let mut labels = Vec::with_capacity(picks.len());
    let mut ids = Vec::with_capacity(picks.len());
    for (label, j) in picks {
        let seq = &data[groups[label][j]];
        let idx = sampler.sample(seq.len, rng);
        seq.gather(&idx, &mut pixels);
        labels.push(label);
        ids.push(seq.id.to_string());
    }
    let [h, w] = [crate::data::FRAME_HEIGHT, crate::data::FRAME_WIDTH];
    Ok(Batch {
        frames: Tensor::new(vec![labels.len() * n, 1, h, w], pixels)?,
        labels,
        seq_len: n,
        ids,
    })
}

/// One row of the loss curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub triplet: f64,
    pub cross_entropy: f64,
    pub total: f64,
    pub nonzero_fraction: f64,
}

pub const LOSS_CSV_HEADER: &str = "iteration,l_tri,l_ce,l_final,nonzero_frac";

impl LossRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.iteration, self.triplet, self.cross_entropy, self.total, self.nonzero_fraction
        )
    }
}

/// Forward, backward and one optimizer update on `batch`.
pub fn train_step(
    model: &mut Model,
    state: &mut OptimState,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    batch: &Batch,
    iteration: usize,
) -> Result<(LossRecord, bool)> {
    let params = model.params.bind::<f32>(true);
    let frames = Var::constant(batch.frames.clone());
    let emb = model.embed(&params, &frames, batch.seq_len)?;
    let (tri, stats) = batch_all_triplet(&emb, &batch.labels, loss_cfg.margin)?;
    let ce = match model.logits(&params, &emb)? {
        Some(z) => Some(cross_entropy(&z, &batch.labels)?),
        None => None,
    };
    let total = combine(&tri, ce.as_ref(), loss_cfg.alpha, loss_cfg.beta)?;
    let rec = LossRecord {
        iteration,
        triplet: tri.item() as f64,
        cross_entropy: ce.as_ref().map_or(0.0, |c| c.item() as f64),
        total: total.item() as f64,
        nonzero_fraction: stats.nonzero_fraction(),
    };
    if !rec.total.is_finite() {
        return Err(Error::Diverged {
            iteration,
            batch: batch.ids.clone(),
        });
    }
    let grads = backward(&total)?;
    model.params.zero_grad();
    model.params.accumulate(&params, &grads);
    let lr = cfg.lr_at(iteration);
    match cfg.optimizer {
        Optimizer::Adam => adam_step(model, state, lr, cfg.weight_decay),
        Optimizer::SgdMomentum => sgd_momentum_step(model, state, lr, cfg.weight_decay, cfg.momentum),
    }
    Ok((rec, stats.degenerate))
}

/// Batch RNG for one iteration; independent of how many iterations ran before,
/// so resumed runs draw the same batches.
pub fn iteration_rng(seed: u64, iteration: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration as u64);
    rng
}

/// Everything the loop needs besides the model and data.
#[derive(Debug, Clone)]
pub struct TrainSetup {
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub batch: BatchSpec,
    pub loss: LossConfig,
    pub seed: u64,
    /// Receives `loss.csv`, periodic `ckpt_<iter>.ckpt` and the final `model.ckpt`.
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainSummary {
    pub curve: Vec<LossRecord>,
    pub degenerate_batches: usize,
}

/// Path of the final checkpoint inside an output directory.
pub fn final_checkpoint(dir: &Path) -> PathBuf {
    dir.join("model.ckpt")
}

/// Runs iterations `start..train.iterations`, continuing from `state`.
pub fn train(
    model: &mut Model,
    data: &[LoadedSequence],
    setup: &TrainSetup,
    mut state: OptimState,
    start: usize,
) -> Result<TrainSummary> {
    setup.train.validate()?;
    setup.sampler.validate()?;
    setup.batch.validate()?;
    setup.loss.validate()?;
    let groups = group_by_label(data);
    let mut csv = match &setup.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("loss.csv");
            let resume = start > 0 && path.exists();
            let f = fs::OpenOptions::new()
                .create(true)
                .append(resume)
                .write(true)
                .truncate(!resume)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            let mut w = std::io::BufWriter::new(f);
            if !resume {
                writeln!(w, "{LOSS_CSV_HEADER}").map_err(|e| Error::io(&path, e))?;
            }
            Some((w, path))
        }
        None => None,
    };
    let mut summary = TrainSummary::default();
    for it in start..setup.train.iterations {
        let mut rng = iteration_rng(setup.seed, it);
        let batch = compose_batch(data, &groups, &setup.sampler, setup.batch, &mut rng)?;
        let (rec, degenerate) = train_step(model, &mut state, &setup.train, &setup.loss, &batch, it)?;
        summary.degenerate_batches += usize::from(degenerate);
        if let Some((w, path)) = csv.as_mut() {
            writeln!(w, "{}", rec.csv_row()).map_err(|e| Error::io(&*path, e))?;
        }
        let done = it + 1;
        if setup.train.log_every > 0 && done % setup.train.log_every == 0 {
            log::info!(
                "iter {done}/{} loss {:.4} tri {:.4} ce {:.4} nonzero {:.3} lr {:.2e}",
                setup.train.iterations,
                rec.total,
                rec.triplet,
                rec.cross_entropy,
                rec.nonzero_fraction,
                setup.train.lr_at(it)
            );
        }
        summary.curve.push(rec);
        if let Some(dir) = &setup.out_dir {
            let every = setup.train.checkpoint_every;
            if every > 0 && done % every == 0 && done < setup.train.iterations {
                model.save(&dir.join(format!("ckpt_{done:07}.ckpt")), &state.entries(model, done))?;
            }
        }
    }
    if let Some((mut w, path)) = csv {
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    if let Some(dir) = &setup.out_dir {
        model.save(&final_checkpoint(dir), &state.entries(model, setup.train.iterations))?;
    }
    if summary.degenerate_batches > 0 {
        log::warn!("{} batches had no valid triplets", summary.degenerate_batches);
    }
    Ok(summary)
}
