//! Synthetic walking silhouettes.
//!
//! Every subject is a capsule-and-disc figure with its own body proportions
//! and gait dynamics; every sequence adds a viewpoint shear, walking speed
//! jitter, a horizontal offset, a random start phase and pixel noise.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{FRAME_HEIGHT, FRAME_WIDTH};
use super::pgm::{self, Gray};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub subjects: usize,
    pub seqs_per_subject: usize,
    /// Frames per sequence (the maximum when `min_frames` is set).
    pub frames: usize,
    /// When set, each sequence length is drawn uniformly from `min_frames..=frames`.
    pub min_frames: Option<usize>,
    pub seed: u64,
}

/// Ranges of the per-subject parameters, in order.
const RANGES: [(f64, f64); 11] = [
    (0.72, 0.92), // height, fraction of frame height
    (0.11, 0.21), // torso width, fraction of body height
    (0.055, 0.085), // head radius, fraction of body height
    (0.42, 0.54), // leg length, fraction of body height
    (0.9, 2.2),   // limb half-thickness, pixels
    (0.25, 0.60), // hip swing amplitude, radians
    (0.05, 0.60), // arm swing amplitude, radians
    (8.0, 16.0),  // gait period, frames
    (0.0, 2.0 * PI), // phase
    (-0.08, 0.18), // forward lean, radians
    (0.15, 0.80), // knee flexion, radians
];

/// Minimum euclidean distance between two subjects' parameter vectors after
/// scaling every coordinate to `[0, 1]`.
pub const MIN_SEPARATION: f64 = 0.35;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WalkerParams(pub [f64; 11]);

impl WalkerParams {
    fn draw(rng: &mut impl Rng) -> Self {
        let mut v = [0.0; 11];
        for (x, &(lo, hi)) in v.iter_mut().zip(&RANGES) {
            *x = rng.gen_range(lo..hi);
        }
        WalkerParams(v)
    }

    /// Distance in range-normalised coordinates.
    pub fn separation(&self, other: &Self) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .zip(&RANGES)
            .map(|((a, b), (lo, hi))| ((a - b) / (hi - lo)).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Per-subject parameters, drawn by rejection so that every pair is at least
/// [`MIN_SEPARATION`] apart.
pub fn draw_subjects(count: usize, rng: &mut impl Rng) -> Vec<WalkerParams> {
    let mut out: Vec<WalkerParams> = Vec::with_capacity(count);
    let mut sep = MIN_SEPARATION;
    let mut tries = 0;
    while out.len() < count {
        let p = WalkerParams::draw(rng);
        if out.iter().all(|q| q.separation(&p) >= sep) {
            out.push(p);
            tries = 0;
        } else {
            tries += 1;
            // Keeps very large subject counts from stalling.
            if tries > 10_000 {
                sep *= 0.9;
                tries = 0;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
struct SequenceStyle {
    shear: f64,
    speed: f64,
    offset: f64,
    start: f64,
    noise: f64,
}

impl SequenceStyle {
    fn draw(rng: &mut impl Rng) -> Self {
        SequenceStyle {
            shear: rng.gen_range(-0.12..0.12),
            speed: rng.gen_range(0.9..1.1),
            offset: rng.gen_range(-2.5..2.5),
            start: rng.gen_range(0.0..2.0 * PI),
            noise: 0.004,
        }
    }
}

struct Canvas {
    pix: Vec<f64>,
}

impl Canvas {
    fn new() -> Self {
        Canvas {
            pix: vec![0.0; FRAME_HEIGHT * FRAME_WIDTH],
        }
    }

    fn shade(&mut self, inside: impl Fn(f64, f64) -> bool) {
        for y in 0..FRAME_HEIGHT {
            for x in 0..FRAME_WIDTH {
                if inside(x as f64 + 0.5, y as f64 + 0.5) {
                    self.pix[y * FRAME_WIDTH + x] = 1.0;
                }
            }
        }
    }

    fn capsule(&mut self, a: (f64, f64), b: (f64, f64), r: f64) {
        self.shade(|x, y| {
            let (dx, dy) = (b.0 - a.0, b.1 - a.1);
            let len2 = dx * dx + dy * dy;
            let t = if len2 > 0.0 {
                (((x - a.0) * dx + (y - a.1) * dy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (px, py) = (a.0 + t * dx - x, a.1 + t * dy - y);
            px * px + py * py <= r * r
        });
    }

    fn disc(&mut self, c: (f64, f64), r: f64) {
        self.capsule(c, c, r);
    }
}

/// Point at `len` along the direction `angle` from straight down.
fn limb(from: (f64, f64), angle: f64, len: f64) -> (f64, f64) {
    (from.0 + len * angle.sin(), from.1 + len * angle.cos())
}

fn render(p: &WalkerParams, s: &SequenceStyle, t: usize, rng: &mut impl Rng) -> Vec<u8> {
    let [height, torso_w, head_r, leg_frac, thick, swing, arm, period, phase, lean, knee] = p.0;
    let body = height * FRAME_HEIGHT as f64;
    let ground = FRAME_HEIGHT as f64 - 2.0;
    let phi = 2.0 * PI * t as f64 * s.speed / period + phase + s.start;
    let leg = leg_frac * body;
    let head_r = head_r * body;
    let torso_len = body - leg - 2.0 * head_r;
    let bob = 0.04 * leg * (2.0 * phi).cos().abs();
    let cx = FRAME_WIDTH as f64 / 2.0 + s.offset;
    let hip = (cx, ground - leg + bob);
    let neck = limb(hip, PI + lean, torso_len);
    let head = limb(neck, PI + lean, head_r);

    let mut c = Canvas::new();
    c.capsule(hip, neck, torso_w * body / 2.0);
    c.disc(head, head_r);
    for side in [0.0, PI] {
        let a = swing * (phi + side).sin();
        let k = knee * (phi + side + PI / 2.0).sin().max(0.0);
        let kneep = limb(hip, a, leg / 2.0);
        let foot = limb(kneep, a - k, leg / 2.0);
        c.capsule(hip, kneep, thick);
        c.capsule(kneep, foot, thick);
        let shoulder = limb(hip, PI + lean, torso_len * 0.9);
        let w = -arm * (phi + side).sin();
        let elbow = limb(shoulder, w, 0.38 * body / 2.0);
        let hand = limb(elbow, w - 0.3 * arm, 0.38 * body / 2.0);
        c.capsule(shoulder, elbow, thick * 0.8);
        c.capsule(elbow, hand, thick * 0.8);
    }

    // Viewpoint shear about the ground line, then pixel noise.
    let mut out = vec![0u8; FRAME_HEIGHT * FRAME_WIDTH];
    for y in 0..FRAME_HEIGHT {
        let shift = s.shear * (ground - y as f64);
        for x in 0..FRAME_WIDTH {
            let sx = (x as f64 - shift).round();
            let mut v = if sx >= 0.0 && sx < FRAME_WIDTH as f64 {
                c.pix[y * FRAME_WIDTH + sx as usize] > 0.5
            } else {
                false
            };
            if rng.gen_bool(s.noise) {
                v = !v;
            }
            out[y * FRAME_WIDTH + x] = if v { 255 } else { 0 };
        }
    }
    out
}

/// Frames of one sequence as 0/255 maps.
pub fn render_sequence(p: &WalkerParams, len: usize, rng: &mut impl Rng) -> Vec<Vec<u8>> {
    let style = SequenceStyle::draw(rng);
    (0..len).map(|t| render(p, &style, t, rng)).collect()
}

pub fn subject_name(i: usize) -> String {
    format!("s{i:03}")
}

pub fn sequence_name(i: usize) -> String {
    format!("q{i:02}")
}

/// Writes `root/sNNN/qNN/fNNN.pgm`. Output depends only on the config.
pub fn synth_generate(cfg: &SynthConfig, out: &Path) -> Result<usize> {
    if cfg.subjects == 0 || cfg.seqs_per_subject == 0 || cfg.frames == 0 {
        return Err(Error::Config("synth needs positive subjects, sequences and frames".into()));
    }
    if let Some(m) = cfg.min_frames {
        if m == 0 || m > cfg.frames {
            return Err(Error::Config(format!("min_frames {m} must be in 1..={}", cfg.frames)));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let subjects = draw_subjects(cfg.subjects, &mut rng);
    let mut written = 0;
    for (si, p) in subjects.iter().enumerate() {
        for qi in 0..cfg.seqs_per_subject {
            let len = match cfg.min_frames {
                Some(m) => rng.gen_range(m..=cfg.frames),
                None => cfg.frames,
            };
            let dir = out.join(subject_name(si)).join(sequence_name(qi));
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for (t, pixels) in render_sequence(p, len, &mut rng).into_iter().enumerate() {
                let img = Gray {
                    width: FRAME_WIDTH,
                    height: FRAME_HEIGHT,
                    pixels,
                };
                pgm::write(&dir.join(format!("f{t:03}.pgm")), &img)?;
                written += 1;
            }
        }
    }
    Ok(written)
}
