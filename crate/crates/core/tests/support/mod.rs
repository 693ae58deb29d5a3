//! Checks shared by the core integration tests and the CLI acceptance run.
//!
//! Each check returns a short detail string on success and a description of
//! the first violation on failure.
#![allow(dead_code)]

use mtsgait::backbone::{flops_estimate, Model, ModelConfig, Preset};
use mtsgait::data::{
    load_sequences, read_embeddings, scan, synth_generate, write_embeddings, EmbedFormat, LoadedSequence, SynthConfig,
};
use mtsgait::head::{horizontal_pyramid_pool, separate_fc, temporal_max_pool};
use mtsgait::loss::{batch_all_triplet, cross_entropy};
use mtsgait::mts::{extractor_block, mts_forward, switch_channels, Boundary, BranchEval, Direction, MtsConfig, Proportion};
use mtsgait::retrieval::{evaluate, EmbeddingSet, Metric, SeqId};
use mtsgait::sampling::{cyclic_sample, noncyclic_sample, uniform_sample};
use mtsgait::tensor::{
    backward, conv2d, finite_diff_grad, leaky_relu, linear, max_pool2d, max_relative_error, reshape, sum_all,
    Conv2dParams,
};
use mtsgait::{Scalar, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<String, String>;

pub const GRAD_TOL: f64 = 1e-4;
/// Denominator floor of the relative error, so gradients that are zero up to
/// rounding are compared absolutely.
pub const GRAD_FLOOR: f64 = 1e-3;
pub const FD_EPS: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-scale..scale))
}

/// Values `offset + k / n` for a random permutation of `k`, so no two
/// entries (and so no max) sit within finite-difference reach of each other.
pub fn separated(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut ks: Vec<usize> = (0..n).collect();
    ks.shuffle(rng);
    let offset = rng.gen_range(-1.0..0.0);
    Tensor::new(shape.to_vec(), ks.iter().map(|&k| offset + k as f64 / n as f64).collect()).unwrap()
}

/// Away from the leaky-ReLU kink at zero.
pub fn off_zero(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let v: f64 = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// `sum_i y_i r_i` with fixed random weights, a scalar that sees every output.
pub fn project(y: &Var<f64>, r: &Tensor<f64>) -> Var<f64> {
    let n = y.value().numel();
    let flat = reshape(y, &[1, n]).unwrap();
    let w = Var::constant(r.clone().reshaped(vec![1, n]).unwrap());
    sum_all(&linear(&flat, &w, None).unwrap())
}

/// Max relative error between autograd and central differences over all inputs.
pub fn grad_error(inputs: &[Tensor<f64>], f: impl Fn(&[Var<f64>]) -> Var<f64>) -> f64 {
    let leaves: Vec<Var<f64>> = inputs.iter().map(|t| Var::leaf(t.clone())).collect();
    let loss = f(&leaves);
    let grads = backward(&loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.get(&leaves[i]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.numel()]);
        let fd = finite_diff_grad(
            |t| {
                let vars: Vec<Var<f64>> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, v)| Var::constant(if j == i { t.clone() } else { v.clone() }))
                    .collect();
                f(&vars).item()
            },
            x,
            FD_EPS,
        );
        worst = worst.max(max_relative_error(&analytic, fd.data(), GRAD_FLOOR));
    }
    worst
}

fn mts_cfg(hops: &[usize], direction: Direction, num: u32, den: u32, boundary: Boundary) -> MtsConfig {
    MtsConfig {
        hops: hops.to_vec(),
        direction,
        proportion: Proportion::new(num, den).unwrap(),
        boundary,
    }
}

/// Batch-All triplet hinges of every strip stay this far from the kink.
fn triplet_clear_of_kinks(e: &Tensor<f64>, labels: &[usize], margin: f64) -> bool {
    let (b, s, d) = (e.shape()[0], e.shape()[1], e.shape()[2]);
    let x = e.data();
    let dist = |i: usize, j: usize, st: usize| -> f64 {
        (0..d)
            .map(|k| (x[(i * s + st) * d + k] - x[(j * s + st) * d + k]).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    for st in 0..s {
        for a in 0..b {
            for p in 0..b {
                if p == a || labels[p] != labels[a] {
                    continue;
                }
                for n in 0..b {
                    if labels[n] != labels[a] && (dist(a, p, st) - dist(a, n, st) + margin).abs() < 1e-4 {
                        return false;
                    }
                }
            }
        }
    }
    true
}

/// One gradient check per listed operation and seed; returns the worst error per op.
pub fn gradient_suite(seeds: u64) -> Vec<(&'static str, f64)> {
    type Case = fn(&mut ChaCha8Rng) -> f64;
    let cases: [(&'static str, Case); 12] = [
        ("conv2d", |g| {
            let stride = g.gen_range(1..=2);
            let pad = g.gen_range(0..=1);
            let x = uniform(g, &[2, 3, 5, 6], 1.0);
            let w = uniform(g, &[4, 3, 3, 3], 0.5);
            let b = uniform(g, &[4], 0.5);
            let ho = (5 + 2 * pad - 3) / stride + 1;
            let wo = (6 + 2 * pad - 3) / stride + 1;
            let r = uniform(g, &[2 * 4 * ho * wo], 1.0);
            grad_error(&[x, w, b], |v| {
                project(&conv2d(&v[0], &v[1], Some(&v[2]), Conv2dParams::new(stride, pad)).unwrap(), &r)
            })
        }),
        ("leaky_relu", |g| {
            let x = off_zero(g, &[3, 7]);
            let r = uniform(g, &[21], 1.0);
            grad_error(&[x], |v| project(&leaky_relu(&v[0], 0.01), &r))
        }),
        ("max_pool2d", |g| {
            let x = separated(g, &[2, 3, 6, 4]);
            let r = uniform(g, &[2 * 3 * 3 * 2], 1.0);
            grad_error(&[x], |v| project(&max_pool2d(&v[0], 2, 2).unwrap(), &r))
        }),
        ("linear", |g| {
            let x = uniform(g, &[4, 5], 1.0);
            let w = uniform(g, &[3, 5], 1.0);
            let b = uniform(g, &[3], 1.0);
            let r = uniform(g, &[12], 1.0);
            grad_error(&[x, w, b], |v| project(&linear(&v[0], &v[1], Some(&v[2])).unwrap(), &r))
        }),
        ("switch_channels", |g| {
            let cfg = mts_cfg(&[1], Direction::Bi, 1, 4, Boundary::ZeroFill);
            let hop = g.gen_range(1..=3);
            let x = uniform(g, &[8, 8, 3, 3], 1.0);
            let r = uniform(g, &[8 * 8 * 9], 1.0);
            grad_error(&[x], |v| project(&switch_channels(&v[0], 4, hop, &cfg).unwrap(), &r))
        }),
        ("mts_forward", |g| {
            let boundary = if g.gen_bool(0.5) { Boundary::ZeroFill } else { Boundary::Replicate };
            let cfg = mts_cfg(&[1, 3], Direction::Bi, 1, 4, boundary);
            let x = uniform(g, &[6, 8, 4, 4], 1.0);
            let w = uniform(g, &[3, 8, 3, 3], 0.5);
            let b = uniform(g, &[3], 0.5);
            let r = uniform(g, &[6 * 3 * 16], 1.0);
            grad_error(&[x, w, b], |v| {
                project(&mts_forward(&v[0], &v[1], Some(&v[2]), &cfg, 6, Conv2dParams::new(1, 1)).unwrap(), &r)
            })
        }),
        ("extractor_block", |g| {
            let cfg = mts_cfg(&[1, 2], Direction::Uni, 1, 2, Boundary::ZeroFill);
            let x = uniform(g, &[4, 4, 4, 3], 1.0);
            let w = uniform(g, &[2, 4, 3, 3], 0.5);
            let b = uniform(g, &[2], 0.5);
            let r = uniform(g, &[4 * 2 * 12], 1.0);
            let ok = |v: &[Var<f64>]| {
                // Skip draws that put a pre-activation near the kink.
                let pre = mts_forward(&v[0], &v[1], Some(&v[2]), &cfg, 4, Conv2dParams::new(1, 1)).unwrap();
                let sp = conv2d(&v[0], &v[1], Some(&v[2]), Conv2dParams::new(1, 1)).unwrap();
                pre.data().iter().zip(sp.data()).all(|(a, b)| (a + b).abs() > 1e-4)
            };
            let vars: Vec<Var<f64>> = [&x, &w, &b].iter().map(|t| Var::constant((*t).clone())).collect();
            if !ok(&vars) {
                return 0.0;
            }
            grad_error(&[x, w, b], |v| {
                let y = extractor_block(&v[0], &v[1], Some(&v[2]), Some(&cfg), 4, Conv2dParams::new(1, 1), 0.01, BranchEval::Fused)
                    .unwrap();
                project(&y, &r)
            })
        }),
        ("temporal_max_pool", |g| {
            let x = separated(g, &[6, 2, 3, 2]);
            let r = uniform(g, &[2 * 2 * 3 * 2], 1.0);
            grad_error(&[x], |v| project(&temporal_max_pool(&v[0], 3).unwrap(), &r))
        }),
        ("horizontal_pyramid_pool", |g| {
            let x = separated(g, &[2, 3, 4, 3]);
            let r = uniform(g, &[2 * 2 * 3], 1.0);
            grad_error(&[x], |v| project(&horizontal_pyramid_pool(&v[0], 2).unwrap(), &r))
        }),
        ("separate_fc", |g| {
            let x = uniform(g, &[3, 2, 4], 1.0);
            let w = uniform(g, &[2, 5, 4], 1.0);
            let r = uniform(g, &[3 * 2 * 5], 1.0);
            grad_error(&[x, w], |v| project(&separate_fc(&v[0], &v[1]).unwrap(), &r))
        }),
        ("batch_all_triplet", |g| {
            let labels = [0, 0, 1, 1, 2, 2];
            let margin = 0.3;
            let mut e = uniform(g, &[6, 2, 3], 1.0);
            while !triplet_clear_of_kinks(&e, &labels, margin) {
                e = uniform(g, &[6, 2, 3], 1.0);
            }
            grad_error(&[e], |v| batch_all_triplet(&v[0], &labels, margin).unwrap().0)
        }),
        ("cross_entropy", |g| {
            let z = uniform(g, &[4, 5], 3.0);
            let labels: Vec<usize> = (0..4).map(|_| g.gen_range(0..5)).collect();
            grad_error(&[z], |v| cross_entropy(&v[0], &labels).unwrap())
        }),
    ];
    cases
        .iter()
        .enumerate()
        .map(|(ci, (name, case))| {
            let worst = (0..seeds)
                .map(|s| case(&mut rng(1_000 * ci as u64 + s)))
                .fold(0.0, f64::max);
            (*name, worst)
        })
        .collect()
}

/// Textbook cross-correlation: every output sums `(ci, ky, kx)` in order
/// from zero, then adds the bias.
pub fn naive_conv<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>, stride: usize, pad: usize) -> Tensor<T> {
    let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let at = |b: usize, c: usize, y: isize, xx: isize| -> T {
        if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
            T::zero()
        } else {
            x.data()[((b * ci + c) * h + y as usize) * wd + xx as usize]
        }
    };
    let mut out = vec![T::zero(); n * co * ho * wo];
    for b in 0..n {
        for o in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = T::zero();
                    for c in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let y = (oy * stride + ky) as isize - pad as isize;
                                let xx = (ox * stride + kx) as isize - pad as isize;
                                acc += w.data()[((o * ci + c) * kh + ky) * kw + kx] * at(b, c, y, xx);
                            }
                        }
                    }
                    if let Some(bv) = bias {
                        acc += bv.data()[o];
                    }
                    out[((b * co + o) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, co, ho, wo], out).unwrap()
}

/// Switched copy of `x` for one hop, built channel by channel from the definition.
pub fn naive_switch<T: Scalar>(x: &Tensor<T>, seq_len: usize, hop: usize, cfg: &MtsConfig) -> Tensor<T> {
    let (frames, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let switched = c * cfg.proportion.num() as usize / cfg.proportion.den() as usize;
    let (past, future) = match cfg.direction {
        Direction::Uni => (switched, 0),
        Direction::Bi => (switched / 2, switched / 2),
    };
    let plane = h * w;
    let mut out = vec![T::zero(); x.numel()];
    for f in 0..frames {
        let (seq, t) = (f / seq_len, (f % seq_len) as isize);
        for ch in 0..c {
            let src_t = if ch < past {
                t - hop as isize
            } else if ch >= c - future {
                t + hop as isize
            } else {
                t
            };
            let src_t = match cfg.boundary {
                Boundary::ZeroFill if src_t < 0 || src_t >= seq_len as isize => continue,
                Boundary::ZeroFill => src_t,
                Boundary::Replicate => src_t.clamp(0, seq_len as isize - 1),
            };
            let src = (seq * seq_len + src_t as usize) * c + ch;
            out[(f * c + ch) * plane..][..plane].copy_from_slice(&x.data()[src * plane..][..plane]);
        }
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

/// `sum_j conv(switch_j(x))` over ascending hops, with naive loops.
pub fn naive_mts<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, seq_len: usize, cfg: &MtsConfig, pad: usize) -> Tensor<T> {
    let mut total: Option<Tensor<T>> = None;
    for hop in cfg.sorted_hops() {
        let y = naive_conv(&naive_switch(x, seq_len, hop, cfg), w, Some(b), 1, pad);
        total = Some(match total {
            None => y,
            Some(acc) => {
                let d: Vec<T> = acc.data().iter().zip(y.data()).map(|(&a, &v)| a + v).collect();
                Tensor::new(acc.shape().to_vec(), d).unwrap()
            }
        });
    }
    total.unwrap()
}

fn max_abs_diff<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x.as_f64() - y.as_f64()).abs()).fold(0.0, f64::max)
}

/// Random MTS configurations on shapes up to N=6, c=8, 9x9 against the naive
/// construction: exact in f64, and in f32 against the same loops run in f32.
pub fn mts_oracle(cases: u64) -> Check {
    let mut worst32: f64 = 0.0;
    for s in 0..cases {
        let mut g = rng(77 + s);
        let n = g.gen_range(1..=6);
        let mut c = [4, 8][g.gen_range(0..2)];
        let (h, w) = (g.gen_range(3..=9), g.gen_range(3..=9));
        let co = g.gen_range(1..=4);
        let k = [1, 3][g.gen_range(0..2)];
        let direction = if g.gen_bool(0.5) { Direction::Uni } else { Direction::Bi };
        let (num, den) = [(1, 4), (1, 2), (1, 1)][g.gen_range(0..3)];
        if direction == Direction::Bi && den == 4 {
            c = 8;
        }
        let hops: Vec<usize> = match g.gen_range(0..3) {
            0 => vec![1],
            1 => vec![1, 3],
            _ => vec![2, 1, 4],
        };
        let boundary = if g.gen_bool(0.5) { Boundary::ZeroFill } else { Boundary::Replicate };
        let cfg = mts_cfg(&hops, direction, num, den, boundary);
        let seqs = g.gen_range(1..=2);
        let x = uniform(&mut g, &[seqs * n, c, h, w], 1.0);
        let wt = uniform(&mut g, &[co, c, k, k], 1.0);
        let b = uniform(&mut g, &[co], 1.0);
        let pad = k / 2;
        let expect = naive_mts(&x, &wt, &b, n, &cfg, pad);
        let got = mts_forward(
            &Var::constant(x.clone()),
            &Var::constant(wt.clone()),
            Some(&Var::constant(b.clone())),
            &cfg,
            n,
            Conv2dParams::new(1, pad),
        )
        .map_err(|e| format!("case {s}: {e}"))?;
        if got.data() != expect.data() {
            return Err(format!(
                "case {s} ({cfg:?}, n={n} c={c} {h}x{w}): f64 differs by {:e}",
                max_abs_diff(got.data(), expect.data())
            ));
        }
        let (x32, w32, b32) = (x.cast::<f32>(), wt.cast::<f32>(), b.cast::<f32>());
        let expect32 = naive_mts(&x32, &w32, &b32, n, &cfg, pad);
        let got32 = mts_forward(
            &Var::constant(x32),
            &Var::constant(w32),
            Some(&Var::constant(b32)),
            &cfg,
            n,
            Conv2dParams::new(1, pad),
        )
        .unwrap();
        worst32 = worst32.max(max_abs_diff(got32.data(), expect32.data()));
        if worst32 > 1e-6 {
            return Err(format!("case {s}: f32 differs by {worst32:e}"));
        }
    }
    Ok(format!("{cases} cases exact in f64; f32 max diff {worst32:e}"))
}

pub fn conv_oracle(cases: u64) -> Check {
    for s in 0..cases {
        let mut g = rng(5_000 + s);
        let (n, ci, co) = (g.gen_range(1..=5), g.gen_range(1..=5), g.gen_range(1..=6));
        let k = g.gen_range(1..=5);
        let (h, w) = (g.gen_range(k..=11), g.gen_range(k..=11));
        let stride = g.gen_range(1..=2);
        let pad = g.gen_range(0..=k / 2);
        let x = uniform(&mut g, &[n, ci, h, w], 1.0);
        let wt = uniform(&mut g, &[co, ci, k, k], 1.0);
        let b = uniform(&mut g, &[co], 1.0);
        let got = conv2d(
            &Var::constant(x.clone()),
            &Var::constant(wt.clone()),
            Some(&Var::constant(b.clone())),
            Conv2dParams::new(stride, pad),
        )
        .unwrap();
        if got.data() != naive_conv(&x, &wt, Some(&b), stride, pad).data() {
            return Err(format!("case {s}: conv2d differs from the naive loops"));
        }
        let (x32, w32, b32) = (x.cast::<f32>(), wt.cast::<f32>(), b.cast::<f32>());
        let got32 = conv2d(
            &Var::constant(x32.clone()),
            &Var::constant(w32.clone()),
            Some(&Var::constant(b32.clone())),
            Conv2dParams::new(stride, pad),
        )
        .unwrap();
        if got32.data() != naive_conv(&x32, &w32, Some(&b32), stride, pad).data() {
            return Err(format!("case {s}: f32 conv2d differs from the naive loops"));
        }
    }
    Ok(format!("{cases} cases bit-identical in f64 and f32"))
}

/// Parameter names, shapes and totals with MTS equal those without.
pub fn zero_parameter_property() -> Check {
    let mut totals = Vec::new();
    for preset in [Preset::Tiny, Preset::Gait3d, Preset::Grew] {
        let mut with = ModelConfig::preset(preset, Some(MtsConfig::default()));
        with.head.num_classes = 10;
        let a = Model::build(with.clone(), 0).map_err(|e| e.to_string())?;
        let b = Model::build(with.spatial_only(), 0).map_err(|e| e.to_string())?;
        let table = |m: &Model| -> Vec<(String, Vec<usize>)> {
            m.params.iter().map(|p| (p.name.clone(), p.tensor.shape().to_vec())).collect()
        };
        if table(&a) != table(&b) || a.count_parameters() != b.count_parameters() {
            return Err(format!("{preset:?}: parameter tables differ"));
        }
        totals.push(format!("{preset:?}={}", a.count_parameters()));
    }
    Ok(totals.join(" "))
}

/// Per-layer MAC factors against the closed forms; 27 = 27 at a=3, k=2.
pub fn complexity_equality() -> Check {
    let cfg = ModelConfig::preset(Preset::Gait3d, Some(MtsConfig::default()));
    let report = flops_estimate(&cfg, true).map_err(|e| e.to_string())?;
    for (l, layer) in report.layers.iter().zip(&cfg.layers) {
        let a = layer.kernel;
        let k = layer.mts.as_ref().map_or(0, |m| m.hops.len());
        let base = (l.out_h * l.out_w * l.c_in * l.c_out) as u64;
        if l.mts_factor != a * a * (k + 1) || l.conv3d_factor != a * a * a {
            return Err(format!("layer {}: factors {} / {}", l.layer, l.mts_factor, l.conv3d_factor));
        }
        if l.mts_macs != base * l.mts_factor as u64 || l.conv3d_macs != base * l.conv3d_factor as u64 {
            return Err(format!("layer {}: MAC totals do not match the closed form", l.layer));
        }
        if a == 3 && k == 2 && l.mts_factor != l.conv3d_factor {
            return Err(format!("layer {}: {} != {}", l.layer, l.mts_factor, l.conv3d_factor));
        }
    }
    let l = &report.layers[1];
    Ok(format!("a=3 k=2: MTS {} = 3D {}", l.mts_factor, l.conv3d_factor))
}

/// Non-cyclic sampling never jumps from the end of a sequence back to its start.
pub fn no_wrap(idx: &[usize], len: usize, n: usize) -> bool {
    idx.len() == n && idx.iter().all(|&i| i < len) && idx.windows(2).all(|w| w[1] >= w[0] && w[1] - w[0] <= 1)
}

pub fn sampling_suite(trials: usize) -> Check {
    let one_based = |v: Vec<usize>| v.into_iter().map(|i| i + 1).collect::<Vec<_>>();
    if one_based(noncyclic_sample(5, 8, 0)) != [1, 1, 2, 2, 3, 3, 4, 5] {
        return Err("noncyclic(5, 8) fixture".into());
    }
    if one_based(uniform_sample(8, 4)) != [1, 3, 5, 7] {
        return Err("uniform(8, 4) fixture".into());
    }
    let mut g = rng(9);
    for _ in 0..trials {
        let len = g.gen_range(1..=80);
        let n = g.gen_range(1..=80);
        let start = if len > n { g.gen_range(0..=len - n) } else { 0 };
        let nc = noncyclic_sample(len, n, start);
        if !no_wrap(&nc, len, n) {
            return Err(format!("noncyclic({len}, {n}, {start}) = {nc:?} wraps or leaves range"));
        }
        if len >= n && cyclic_sample(len, n, start) != nc {
            return Err(format!("cyclic and noncyclic differ at L={len} N={n} t={start}"));
        }
    }
    Ok(format!("fixtures ok, {trials} random (L, N) pairs"))
}

/// Rank of the first hit, AP and INP by sorting the gallery outright.
pub fn brute_force_scores(dist: &[f64], positive: &[bool]) -> Option<(usize, f64, f64)> {
    let mut order: Vec<usize> = (0..dist.len()).collect();
    order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
    let total = positive.iter().filter(|&&p| p).count();
    if total == 0 {
        return None;
    }
    let (mut hits, mut ap, mut first, mut last) = (0, 0.0, 0, 0);
    for (r, &i) in order.iter().enumerate() {
        if positive[i] {
            hits += 1;
            ap += hits as f64 / (r + 1) as f64;
            if first == 0 {
                first = r + 1;
            }
            last = r + 1;
        }
    }
    Some((first, 100.0 * ap / total as f64, 100.0 * total as f64 / last as f64))
}

fn one_dim_set(values: &[f32], subjects: &[&str]) -> EmbeddingSet {
    let mut s = EmbeddingSet::new(1, 1);
    for (i, (&v, subj)) in values.iter().zip(subjects).enumerate() {
        s.push(SeqId::new(*subj, format!("g{i}")), &[v]).unwrap();
    }
    s
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// `evaluate` against brute force on every permutation of 5-element galleries,
/// plus the fixture with positives at ranks 1 and 3 of 5.
pub fn metric_oracle() -> Check {
    let mut probe = EmbeddingSet::new(1, 1);
    probe.push(SeqId::new("p", "probe"), &[0.0]).unwrap();
    for mask in 1u32..32 {
        for perm in permutations(5) {
            let values: Vec<f32> = perm.iter().map(|&r| (r + 1) as f32).collect();
            let subjects: Vec<&str> = (0..5).map(|i| if mask >> i & 1 == 1 { "p" } else { "n" }).collect();
            let gallery = one_dim_set(&values, &subjects);
            let rep = evaluate(&probe, &gallery, Metric::Euclidean, &[1, 2, 3, 4, 5]).map_err(|e| e.to_string())?;
            let dist: Vec<f64> = values.iter().map(|&v| v as f64).collect();
            let positive: Vec<bool> = subjects.iter().map(|&s| s == "p").collect();
            let (first, ap, inp) = brute_force_scores(&dist, &positive).unwrap();
            for k in 1..=5 {
                let expect = if first <= k { 100.0 } else { 0.0 };
                if rep.rank(k) != Some(expect) {
                    return Err(format!("mask {mask:05b} perm {perm:?}: rank-{k}"));
                }
            }
            if (rep.map - ap).abs() > 1e-9 || (rep.minp - inp).abs() > 1e-9 {
                return Err(format!("mask {mask:05b} perm {perm:?}: AP/INP {} {} vs {ap} {inp}", rep.map, rep.minp));
            }
        }
    }
    let gallery = one_dim_set(&[1.0, 2.0, 3.0, 4.0, 5.0], &["p", "n", "p", "n", "n"]);
    let rep = evaluate(&probe, &gallery, Metric::Euclidean, &[1]).map_err(|e| e.to_string())?;
    if (rep.map - 83.33).abs() > 0.01 || (rep.minp - 66.67).abs() > 0.01 {
        return Err(format!("fixture AP {:.4} INP {:.4}", rep.map, rep.minp));
    }
    Ok(format!("3720 galleries match; fixture AP {:.2} INP {:.2}", rep.map, rep.minp))
}

/// Renders a synthetic dataset into a temporary directory and loads all of it.
pub fn synth_dataset(subjects: usize, seqs: usize, frames: usize, seed: u64) -> (tempfile::TempDir, Vec<LoadedSequence>) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        subjects,
        seqs_per_subject: seqs,
        frames,
        min_frames: None,
        seed,
    };
    synth_generate(&cfg, dir.path()).unwrap();
    let index = scan(dir.path()).unwrap();
    let items: Vec<(usize, usize)> = (0..subjects).flat_map(|s| (0..seqs).map(move |q| (s, q))).collect();
    let data = load_sequences(&index, &items, usize::MAX).unwrap();
    (dir, data)
}

fn sequence_tensor(s: &LoadedSequence, order: &[usize]) -> Tensor<f32> {
    let mut v = Vec::new();
    s.gather(order, &mut v);
    Tensor::new(vec![order.len(), 1, 64, 44], v).unwrap()
}

/// Spatial-only embeddings ignore frame order; MTS embeddings do not.
pub fn order_sensitivity(shuffles: usize) -> Check {
    let (_dir, data) = synth_dataset(1, 1, 12, 21);
    let seq = &data[0];
    let mts = Model::build(ModelConfig::preset(Preset::Tiny, Some(MtsConfig::default())), 3).map_err(|e| e.to_string())?;
    let mut spatial_cfg = mts.config.spatial_only();
    spatial_cfg.head = mts.config.head;
    let spatial = Model::build(spatial_cfg, 3).map_err(|e| e.to_string())?;
    let ordered: Vec<usize> = (0..seq.len).collect();
    let base_s = spatial.embed_sequence(sequence_tensor(seq, &ordered)).unwrap();
    let base_m = mts.embed_sequence(sequence_tensor(seq, &ordered)).unwrap();
    let mut g = rng(4);
    let mut differing = 0;
    for _ in 0..shuffles {
        let mut order = ordered.clone();
        order.shuffle(&mut g);
        if spatial.embed_sequence(sequence_tensor(seq, &order)).unwrap() != base_s {
            return Err(format!("spatial-only embedding changed under shuffle {order:?}"));
        }
        if mts.embed_sequence(sequence_tensor(seq, &order)).unwrap() != base_m {
            differing += 1;
        }
    }
    if differing == 0 {
        return Err(format!("MTS embedding unchanged under all {shuffles} shuffles"));
    }
    Ok(format!("spatial invariant; MTS differs under {differing}/{shuffles} shuffles"))
}

/// Checkpoint bytes and forward outputs survive save and load unchanged, and
/// so do embeddings in both file formats.
pub fn persistence_round_trips() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ModelConfig::preset(Preset::Tiny, Some(MtsConfig::default()));
    cfg.head.num_classes = 5;
    let model = Model::build(cfg.clone(), 8).map_err(|e| e.to_string())?;
    let path = dir.path().join("m.ckpt");
    model.save(&path, &[]).map_err(|e| e.to_string())?;
    let (back, extra) = Model::load(cfg, &path).map_err(|e| e.to_string())?;
    if !extra.is_empty() {
        return Err("unexpected extra checkpoint entries".into());
    }
    for (a, b) in model.params.iter().zip(back.params.iter()) {
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        if a.name != b.name || bits(&a.tensor) != bits(&b.tensor) {
            return Err(format!("{} changed across save/load", a.name));
        }
    }
    let back_path = dir.path().join("again.ckpt");
    back.save(&back_path, &[]).map_err(|e| e.to_string())?;
    if std::fs::read(&path).unwrap() != std::fs::read(&back_path).unwrap() {
        return Err("re-saved checkpoint bytes differ".into());
    }
    let (_d, data) = synth_dataset(2, 1, 6, 5);
    let before = model.embed_all(&data).map_err(|e| e.to_string())?;
    let after = back.embed_all(&data).map_err(|e| e.to_string())?;
    if before.data.iter().map(|v| v.to_bits()).ne(after.data.iter().map(|v| v.to_bits())) {
        return Err("forward differs after load".into());
    }
    let bin = dir.path().join("e.bin");
    write_embeddings(&bin, &before, EmbedFormat::Binary).map_err(|e| e.to_string())?;
    let b = read_embeddings(&bin).map_err(|e| e.to_string())?;
    if b.ids != before.ids || b.data.iter().map(|v| v.to_bits()).ne(before.data.iter().map(|v| v.to_bits())) {
        return Err("binary embeddings not bit-exact".into());
    }
    let txt = dir.path().join("e.txt");
    write_embeddings(&txt, &before, EmbedFormat::Text).map_err(|e| e.to_string())?;
    let t = read_embeddings(&txt).map_err(|e| e.to_string())?;
    if t.ids != before.ids || t.data.iter().zip(&before.data).any(|(a, b)| (a - b).abs() > 1e-6) {
        return Err("text embeddings drift beyond 1e-6".into());
    }
    Ok("checkpoint, forward and embeddings bit-exact".into())
}
