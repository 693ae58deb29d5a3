//! Multi-hop temporal switch.
//!
//! A layer's input `F` holds `N` consecutive frames of one or more sequences,
//! stacked along the batch axis. For hop `j`, the leading channel group of
//! frame `t` is replaced by the same group from frame `t - j` and (for the
//! bi-directional style) the trailing group by the one from frame `t + j`.
//! The switched copy is convolved with the *same* weights as the spatial
//! branch, and the responses of all hops are summed:
//!
//! ```text
//! G = act( sum_j conv(switch_j(F)) + conv(F) )
//! ```
//!
//! Switching adds no parameters; temporal context enters purely through which
//! frame each input channel is read from.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{add, conv2d, leaky_relu, scale, Conv2dParams, Scalar, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Leading group from `t - j` only.
    Uni,
    /// Leading group from `t - j`, trailing group from `t + j`.
    Bi,
}

/// What fills channels switched in from a frame outside the sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    ZeroFill,
    /// Clamp the source frame index into the sequence.
    Replicate,
}

/// How an extractor block evaluates its spatial + temporal branches.
///
/// Convolution is linear in its input, so `conv(F) + sum_j conv(S_j F)` equals
/// `conv(F + sum_j S_j F)` with the bias counted once per branch. `Fused`
/// evaluates the right-hand side (one convolution); `Separate` runs one
/// convolution per branch. The two agree up to float rounding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchEval {
    #[default]
    Fused,
    Separate,
}

/// Fraction of channels exchanged between frames, kept as a reduced ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Proportion {
    num: u32,
    den: u32,
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl Proportion {
    pub fn new(num: u32, den: u32) -> Result<Self> {
        if den == 0 || num > den {
            return Err(Error::Config(format!(
                "switch proportion {num}/{den} must lie in [0, 1]"
            )));
        }
        let g = gcd(num, den).max(1);
        Ok(Proportion {
            num: num / g,
            den: den / g,
        })
    }

    pub const ZERO: Proportion = Proportion { num: 0, den: 1 };
    pub const ONE: Proportion = Proportion { num: 1, den: 1 };

    pub fn num(&self) -> u32 {
        self.num
    }

    pub fn den(&self) -> u32 {
        self.den
    }

    pub fn is_zero(&self) -> bool {
        self.num == 0
    }

    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl fmt::Display for Proportion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for Proportion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("cannot parse switch proportion {s:?}; expected e.g. \"1/4\""));
        match s.split_once('/') {
            Some((n, d)) => Proportion::new(
                n.trim().parse().map_err(|_| bad())?,
                d.trim().parse().map_err(|_| bad())?,
            ),
            None => match s.trim() {
                "0" => Ok(Proportion::ZERO),
                "1" => Ok(Proportion::ONE),
                _ => Err(bad()),
            },
        }
    }
}

impl Serialize for Proportion {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Proportion {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Channel counts taken from the past (`t - j`) and future (`t + j`) frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SwitchGroups {
    pub past: usize,
    pub future: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MtsConfig {
    pub hops: Vec<usize>,
    pub direction: Direction,
    pub proportion: Proportion,
    pub boundary: Boundary,
}

impl Default for MtsConfig {
    fn default() -> Self {
        MtsConfig {
            hops: vec![1, 3],
            direction: Direction::Bi,
            proportion: Proportion { num: 1, den: 4 },
            boundary: Boundary::ZeroFill,
        }
    }
}

impl MtsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hops.is_empty() {
            return Err(Error::Config("MTS hop set must not be empty".into()));
        }
        if self.hops.contains(&0) {
            return Err(Error::Config("MTS hops must be at least 1".into()));
        }
        let mut sorted = self.hops.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.hops.len() {
            return Err(Error::Config(format!("duplicate MTS hops in {:?}", self.hops)));
        }
        Ok(())
    }

    /// Hops in ascending order; branch outputs are summed in this order.
    pub fn sorted_hops(&self) -> Vec<usize> {
        let mut h = self.hops.clone();
        h.sort_unstable();
        h.dedup();
        h
    }

    /// Number of equal channel parts whose first (and last, for `Bi`) part is
    /// switched, when the proportion maps onto whole parts.
    pub fn partition_parts(&self) -> Option<u32> {
        let Proportion { num, den } = self.proportion;
        if num == 0 {
            return None;
        }
        let parts = match self.direction {
            Direction::Uni => den,
            Direction::Bi => 2 * den,
        };
        (parts % num == 0).then_some(parts / num)
    }

    /// Switched group sizes for a layer with `channels` input channels.
    pub fn groups(&self, channels: usize) -> Result<SwitchGroups> {
        let Proportion { num, den } = self.proportion;
        if num == 0 {
            return Ok(SwitchGroups { past: 0, future: 0 });
        }
        let total = channels * num as usize;
        if total % den as usize != 0 {
            return Err(Error::Config(format!(
                "switch proportion {} of {channels} channels is not a whole number",
                self.proportion
            )));
        }
        let switched = total / den as usize;
        match self.direction {
            Direction::Uni => Ok(SwitchGroups {
                past: switched,
                future: 0,
            }),
            Direction::Bi if switched % 2 != 0 => Err(Error::Config(format!(
                "bi-directional switch of {switched} of {channels} channels cannot be split evenly"
            ))),
            Direction::Bi => Ok(SwitchGroups {
                past: switched / 2,
                future: switched / 2,
            }),
        }
    }
}

fn frame_layout(shape: &[usize], seq_len: usize) -> Result<(usize, usize, usize)> {
    if shape.len() != 4 {
        return Err(Error::shape("switch_channels", format!("expected [n,c,h,w], got {shape:?}")));
    }
    if seq_len == 0 || shape[0] % seq_len != 0 {
        return Err(Error::shape(
            "switch_channels",
            format!("{} frames do not split into sequences of {seq_len}", shape[0]),
        ));
    }
    Ok((shape[0], shape[1], shape[2] * shape[3]))
}

/// Source frame for a group of frame `t`, or `None` for a zero fill.
fn source_frame(t: usize, seq_len: usize, offset: isize, boundary: Boundary) -> Option<usize> {
    let seq_start = t - t % seq_len;
    let local = (t % seq_len) as isize + offset;
    let local = if (0..seq_len as isize).contains(&local) {
        local
    } else {
        match boundary {
            Boundary::ZeroFill => return None,
            Boundary::Replicate => local.clamp(0, seq_len as isize - 1),
        }
    };
    Some(seq_start + local as usize)
}

/// For each output frame: sources of the past and future groups.
type Routing = Vec<(Option<usize>, Option<usize>)>;

fn routing(frames: usize, seq_len: usize, hop: usize, boundary: Boundary) -> Routing {
    (0..frames)
        .map(|t| {
            (
                source_frame(t, seq_len, -(hop as isize), boundary),
                source_frame(t, seq_len, hop as isize, boundary),
            )
        })
        .collect()
}

/// Adds (`acc += switched(src)`) or copies one hop's switched frames.
fn apply_switch<T: Scalar>(src: &[T], dst: &mut [T], route: &Routing, c: usize, plane: usize, groups: SwitchGroups, accumulate: bool) {
    let frame = c * plane;
    for (t, &(past, future)) in route.iter().enumerate() {
        let out = &mut dst[t * frame..][..frame];
        for ch in 0..c {
            let from = if ch < groups.past {
                past
            } else if ch >= c - groups.future {
                future
            } else {
                Some(t)
            };
            let o = &mut out[ch * plane..][..plane];
            match (from, accumulate) {
                (Some(s), true) => o
                    .iter_mut()
                    .zip(&src[s * frame + ch * plane..][..plane])
                    .for_each(|(a, &b)| *a += b),
                (Some(s), false) => o.copy_from_slice(&src[s * frame + ch * plane..][..plane]),
                (None, true) => {}
                (None, false) => o.fill(T::zero()),
            }
        }
    }
}

/// Transpose of [`apply_switch`]: scatters `grad` back to source frames.
fn scatter_switch<T: Scalar>(grad: &[T], acc: &mut [T], route: &Routing, c: usize, plane: usize, groups: SwitchGroups) {
    let frame = c * plane;
    for (t, &(past, future)) in route.iter().enumerate() {
        for ch in 0..c {
            let from = if ch < groups.past {
                past
            } else if ch >= c - groups.future {
                future
            } else {
                Some(t)
            };
            if let Some(s) = from {
                acc[s * frame + ch * plane..][..plane]
                    .iter_mut()
                    .zip(&grad[t * frame + ch * plane..][..plane])
                    .for_each(|(a, &b)| *a += b);
            }
        }
    }
}

/// Switches channel groups of `x: [B*seq_len, c, h, w]` between frames `hop`
/// apart, independently within each sequence of `seq_len` frames.
///
/// With a zero proportion the input is returned unchanged.
pub fn switch_channels<T: Scalar>(x: &Var<T>, seq_len: usize, hop: usize, cfg: &MtsConfig) -> Result<Var<T>> {
    let (frames, c, plane) = frame_layout(x.shape(), seq_len)?;
    if hop == 0 {
        return Err(Error::Config("MTS hop must be at least 1".into()));
    }
    let groups = cfg.groups(c)?;
    if groups.past == 0 && groups.future == 0 {
        return Ok(x.clone());
    }
    let route = routing(frames, seq_len, hop, cfg.boundary);
    let mut out = vec![T::zero(); x.value().numel()];
    apply_switch(x.data(), &mut out, &route, c, plane, groups, false);
    let value = Tensor::new(x.shape().to_vec(), out)?;
    Ok(Var::from_op(value, vec![x.clone()], move |ctx| {
        let mut g = vec![T::zero(); ctx.grad.len()];
        scatter_switch(ctx.grad, &mut g, &route, c, plane, groups);
        vec![Some(g)]
    }))
}

/// `x + sum_j switch_j(x)`: the single input the fused block convolves.
pub fn temporal_mix<T: Scalar>(x: &Var<T>, seq_len: usize, cfg: &MtsConfig) -> Result<Var<T>> {
    let (frames, c, plane) = frame_layout(x.shape(), seq_len)?;
    cfg.validate()?;
    let groups = cfg.groups(c)?;
    let routes: Vec<Routing> = cfg
        .sorted_hops()
        .into_iter()
        .map(|h| routing(frames, seq_len, h, cfg.boundary))
        .collect();
    let mut out = x.data().to_vec();
    for route in &routes {
        apply_switch(x.data(), &mut out, route, c, plane, groups, true);
    }
    let value = Tensor::new(x.shape().to_vec(), out)?;
    Ok(Var::from_op(value, vec![x.clone()], move |ctx| {
        let mut g = ctx.grad.to_vec();
        for route in &routes {
            scatter_switch(ctx.grad, &mut g, route, c, plane, groups);
        }
        vec![Some(g)]
    }))
}

/// Temporal branch: sum over hops (ascending) of shared-weight convolutions of
/// the switched input.
pub fn mts_forward<T: Scalar>(
    x: &Var<T>,
    weight: &Var<T>,
    bias: Option<&Var<T>>,
    cfg: &MtsConfig,
    seq_len: usize,
    conv: Conv2dParams,
) -> Result<Var<T>> {
    cfg.validate()?;
    let mut total: Option<Var<T>> = None;
    for hop in cfg.sorted_hops() {
        let switched = switch_channels(x, seq_len, hop, cfg)?;
        let y = conv2d(&switched, weight, bias, conv)?;
        total = Some(match total {
            None => y,
            Some(acc) => add(&acc, &y)?,
        });
    }
    Ok(total.expect("validated non-empty hop set"))
}

/// Spatial + temporal feature extractor, `act(MTS(F) + conv(F))`. With
/// `mts = None` only the spatial branch runs.
#[allow(clippy::too_many_arguments)]
pub fn extractor_block<T: Scalar>(
    x: &Var<T>,
    weight: &Var<T>,
    bias: Option<&Var<T>>,
    mts: Option<&MtsConfig>,
    seq_len: usize,
    conv: Conv2dParams,
    slope: f64,
    eval: BranchEval,
) -> Result<Var<T>> {
    let pre = match (mts, eval) {
        (None, _) => conv2d(x, weight, bias, conv)?,
        (Some(cfg), BranchEval::Separate) => {
            let temporal = mts_forward(x, weight, bias, cfg, seq_len, conv)?;
            let spatial = conv2d(x, weight, bias, conv)?;
            add(&temporal, &spatial)?
        }
        (Some(cfg), BranchEval::Fused) => {
            let mixed = temporal_mix(x, seq_len, cfg)?;
            let branches = cfg.sorted_hops().len() + 1;
            let b = bias.map(|b| scale(b, branches as f64));
            conv2d(&mixed, weight, b.as_ref(), conv)?
        }
    };
    Ok(leaky_relu(&pre, slope))
}
