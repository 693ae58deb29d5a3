//! Frame-level CNN plus head: model configuration, presets, parameter
//! construction, forward passes and the cost model.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{checkpoint, LoadedSequence};
use crate::error::{Error, Result};
use crate::head::{horizontal_pyramid_pool, mean_over_strips, separate_fc, temporal_max_pool, HeadConfig};
use crate::mts::{extractor_block, BranchEval, MtsConfig};
use crate::retrieval::EmbeddingSet;
use crate::tensor::conv::output_extent;
use crate::tensor::{max_pool2d, Conv2dParams, ParamId, ParamStore, Parameter, Scalar, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Two-layer desk-scale model.
    #[serde(alias = "desk")]
    Tiny,
    Gait3d,
    Grew,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" | "desk" => Ok(Preset::Tiny),
            "gait3d" => Ok(Preset::Gait3d),
            "grew" => Ok(Preset::Grew),
            _ => Err(Error::Config(format!("unknown preset {s:?} (desk | tiny | gait3d | grew)"))),
        }
    }
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerConfig {
    pub out_channels: usize,
    pub kernel: usize,
    pub padding: usize,
    #[serde(default = "one")]
    pub stride: usize,
    /// Temporal switch on this layer's input; `None` is spatial-only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mts: Option<MtsConfig>,
    /// 2x2 max pooling after the activation.
    #[serde(default)]
    pub pool_after: bool,
}

impl LayerConfig {
    fn conv(out_channels: usize, kernel: usize, mts: Option<MtsConfig>, pool_after: bool) -> Self {
        LayerConfig {
            out_channels,
            kernel,
            padding: kernel / 2,
            stride: 1,
            mts,
            pool_after,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub preset: Preset,
    /// Frame height and width.
    pub input_hw: [usize; 2],
    pub layers: Vec<LayerConfig>,
    pub leaky_slope: f64,
    #[serde(default)]
    pub branch_eval: BranchEval,
    pub head: HeadConfig,
}

impl ModelConfig {
    /// Layer plan of a preset with `mts` on every layer after the first.
    pub fn preset(preset: Preset, mts: Option<MtsConfig>) -> Self {
        let plan: &[(usize, bool)] = match preset {
            Preset::Tiny => &[(8, true), (16, true)],
            Preset::Gait3d => &[(64, false), (64, true), (128, false), (128, true), (256, false), (256, false)],
            Preset::Grew => &[
                (32, false),
                (32, false),
                (64, false),
                (64, true),
                (128, false),
                (128, true),
                (256, false),
                (256, false),
            ],
        };
        let layers = plan
            .iter()
            .enumerate()
            .map(|(i, &(c, pool))| {
                let kernel = if i == 0 { 5 } else { 3 };
                LayerConfig::conv(c, kernel, if i == 0 { None } else { mts.clone() }, pool)
            })
            .collect();
        let head = match preset {
            Preset::Tiny => HeadConfig {
                strips: 4,
                embed_dim: 64,
                ..HeadConfig::default()
            },
            _ => HeadConfig::default(),
        };
        ModelConfig {
            preset,
            input_hw: [64, 44],
            layers,
            leaky_slope: 0.01,
            branch_eval: BranchEval::default(),
            head,
        }
    }

    /// Same layers with every temporal switch removed.
    pub fn spatial_only(&self) -> Self {
        let mut c = self.clone();
        c.layers.iter_mut().for_each(|l| l.mts = None);
        c
    }

    /// Per-layer `(c_in, out_h, out_w)` before pooling, and the final map shape.
    fn trace(&self) -> Result<(Vec<(usize, usize, usize)>, [usize; 3])> {
        let [mut h, mut w] = self.input_hw;
        let mut c = 1;
        let mut per = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let name = format!("layer{i}");
            if l.out_channels == 0 || l.kernel == 0 || l.stride == 0 {
                return Err(Error::Config(format!("{name}: channels, kernel and stride must be positive")));
            }
            let (Some(ho), Some(wo)) = (
                output_extent(h, l.kernel, l.stride, l.padding),
                output_extent(w, l.kernel, l.stride, l.padding),
            ) else {
                return Err(Error::Config(format!("{name}: kernel {} does not fit a {h}x{w} map", l.kernel)));
            };
            if let Some(m) = &l.mts {
                m.validate().map_err(|e| Error::Config(format!("{name}: {e}")))?;
                m.groups(c).map_err(|e| Error::Config(format!("{name}: {e}")))?;
            }
            per.push((c, ho, wo));
            (c, h, w) = (l.out_channels, ho, wo);
            if l.pool_after {
                if h < 2 || w < 2 {
                    return Err(Error::Config(format!("{name}: cannot pool a {h}x{w} map")));
                }
                (h, w) = (h / 2, w / 2);
            }
        }
        Ok((per, [c, h, w]))
    }

    /// Backbone output `[channels, height, width]` per frame.
    pub fn output_shape(&self) -> Result<[usize; 3]> {
        Ok(self.trace()?.1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("model needs at least one layer".into()));
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope.is_finite()) {
            return Err(Error::Config(format!("leaky slope must be >= 0, got {}", self.leaky_slope)));
        }
        let [_, h, _] = self.output_shape()?;
        let hd = &self.head;
        if hd.strips == 0 || hd.embed_dim == 0 {
            return Err(Error::Config("head strips and embed_dim must be positive".into()));
        }
        if h % hd.strips != 0 {
            return Err(Error::Config(format!(
                "final feature height {h} is not divisible into {} strips",
                hd.strips
            )));
        }
        Ok(())
    }
}

/// Multiply-accumulate counts for one layer, per frame.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerCost {
    pub layer: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub out_h: usize,
    pub out_w: usize,
    /// Number of hops `k` (0 for spatial-only).
    pub hops: usize,
    /// `a^2 (k + 1)`.
    pub mts_factor: usize,
    /// `a^3`.
    pub conv3d_factor: usize,
    pub mts_macs: u64,
    pub conv3d_macs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub layers: Vec<LayerCost>,
    pub total_mts: u64,
    /// Present when the 3D comparison was requested.
    pub total_conv3d: Option<u64>,
}

impl CostReport {
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:>5} {:>5} {:>5} {:>3} {:>9} {:>4} {:>9} {:>8} {:>14} {:>14}\n",
            "layer", "c_in", "c_out", "a", "out", "k", "a2(k+1)", "a3", "mts_macs", "3d_macs"
        );
        for l in &self.layers {
            out.push_str(&format!(
                "{:>5} {:>5} {:>5} {:>3} {:>9} {:>4} {:>9} {:>8} {:>14} {:>14}\n",
                l.layer,
                l.c_in,
                l.c_out,
                l.kernel,
                format!("{}x{}", l.out_h, l.out_w),
                l.hops,
                l.mts_factor,
                l.conv3d_factor,
                l.mts_macs,
                l.conv3d_macs
            ));
        }
        out.push_str(&format!("total mts macs/frame: {}\n", self.total_mts));
        if let Some(t) = self.total_conv3d {
            out.push_str(&format!("total 3d macs/frame:  {t}\n"));
        }
        out
    }
}

/// Per-frame cost of every layer: `M^2 a^2 (k+1) C_in C_out` with `M^2` the
/// output area, against the 3D reference `M^2 a^3 C_in C_out`.
pub fn flops_estimate(config: &ModelConfig, compare_3d: bool) -> Result<CostReport> {
    let (per, _) = config.trace()?;
    let layers: Vec<LayerCost> = config
        .layers
        .iter()
        .zip(per)
        .enumerate()
        .map(|(i, (l, (c_in, oh, ow)))| {
            let a = l.kernel;
            let k = l.mts.as_ref().map_or(0, |m| m.sorted_hops().len());
            let base = (oh * ow * c_in * l.out_channels) as u64;
            LayerCost {
                layer: i,
                c_in,
                c_out: l.out_channels,
                kernel: a,
                out_h: oh,
                out_w: ow,
                hops: k,
                mts_factor: a * a * (k + 1),
                conv3d_factor: a * a * a,
                mts_macs: base * (a * a * (k + 1)) as u64,
                conv3d_macs: base * (a * a * a) as u64,
            }
        })
        .collect();
    Ok(CostReport {
        total_mts: layers.iter().map(|l| l.mts_macs).sum(),
        total_conv3d: compare_3d.then(|| layers.iter().map(|l| l.conv3d_macs).sum()),
        layers,
    })
}

#[derive(Debug, Clone)]
struct LayerParams {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    layers: Vec<LayerParams>,
    fc: ParamId,
    classifier: Option<ParamId>,
}

impl Model {
    /// Deterministic construction from `seed`. The classifier exists only
    /// when enabled with a positive class count.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut layers = Vec::with_capacity(config.layers.len());
        let mut c_in = 1;
        let slope = config.leaky_slope;
        for (i, l) in config.layers.iter().enumerate() {
            let shape = [l.out_channels, c_in, l.kernel, l.kernel];
            let fan_in = c_in * l.kernel * l.kernel;
            let weight = params.push(Parameter::kaiming_uniform(
                format!("backbone.layer{i}.weight"),
                &shape,
                fan_in,
                slope,
                &mut rng,
            ))?;
            let bias = params.push(Parameter::zeros(format!("backbone.layer{i}.bias"), &[l.out_channels]))?;
            layers.push(LayerParams { weight, bias });
            c_in = l.out_channels;
        }
        let hd = config.head;
        let fc = params.push(Parameter::kaiming_uniform(
            "head.fc.weight",
            &[hd.strips, hd.embed_dim, c_in],
            c_in,
            0.0,
            &mut rng,
        ))?;
        let classifier = if hd.include_classifier && hd.num_classes > 0 {
            Some(params.push(Parameter::kaiming_uniform(
                "head.classifier.weight",
                &[hd.strips, hd.num_classes, hd.embed_dim],
                hd.embed_dim,
                0.0,
                &mut rng,
            ))?)
        } else {
            None
        };
        Ok(Model {
            config,
            params,
            layers,
            fc,
            classifier,
        })
    }

    pub fn count_parameters(&self) -> usize {
        self.params.total_numel()
    }

    pub fn has_classifier(&self) -> bool {
        self.classifier.is_some()
    }

    fn check_frames(&self, shape: &[usize], seq_len: usize) -> Result<()> {
        let [h, w] = self.config.input_hw;
        if shape.len() != 4 || shape[1] != 1 || shape[2] != h || shape[3] != w {
            return Err(Error::shape(
                "forward",
                format!("expected frames [n,1,{h},{w}], got {shape:?}"),
            ));
        }
        if seq_len == 0 || shape[0] % seq_len != 0 {
            return Err(Error::shape(
                "forward",
                format!("{} frames are not whole sequences of {seq_len}", shape[0]),
            ));
        }
        Ok(())
    }

    /// Backbone feature maps `[B*N, C, h, w]` for `frames[B*N, 1, H, W]`, where
    /// each consecutive run of `seq_len` frames is one sequence. `params` comes
    /// from [`ParamStore::bind`] on this model.
    pub fn features<T: Scalar>(&self, params: &[Var<T>], frames: &Var<T>, seq_len: usize) -> Result<Var<T>> {
        self.check_frames(frames.shape(), seq_len)?;
        let mut x = frames.clone();
        for (l, p) in self.config.layers.iter().zip(&self.layers) {
            x = extractor_block(
                &x,
                &params[p.weight.0],
                Some(&params[p.bias.0]),
                l.mts.as_ref(),
                seq_len,
                Conv2dParams::new(l.stride, l.padding),
                self.config.leaky_slope,
                self.config.branch_eval,
            )?;
            if l.pool_after {
                x = max_pool2d(&x, 2, 2)?;
            }
        }
        Ok(x)
    }

    /// Sequence embeddings `[B, strips, embed_dim]`.
    pub fn embed<T: Scalar>(&self, params: &[Var<T>], frames: &Var<T>, seq_len: usize) -> Result<Var<T>> {
        let f = self.features(params, frames, seq_len)?;
        let pooled = temporal_max_pool(&f, seq_len)?;
        let strips = horizontal_pyramid_pool(&pooled, self.config.head.strips)?;
        separate_fc(&strips, &params[self.fc.0])
    }

    /// Identity logits `[B, classes]`, averaged over per-strip classifiers.
    pub fn logits<T: Scalar>(&self, params: &[Var<T>], emb: &Var<T>) -> Result<Option<Var<T>>> {
        match self.classifier {
            None => Ok(None),
            Some(id) => Ok(Some(mean_over_strips(&separate_fc(emb, &params[id.0])?)?)),
        }
    }

    /// Inference embedding of one sequence `[N, 1, H, W]`, as `strips * dim` values.
    pub fn embed_sequence(&self, frames: Tensor<f32>) -> Result<Vec<f32>> {
        let n = frames.shape().first().copied().unwrap_or(0);
        let params = self.params.bind::<f32>(false);
        let e = self.embed(&params, &Var::constant(frames), n)?;
        Ok(e.value().data().to_vec())
    }

    /// Inference embeddings of loaded sequences, in input order.
    pub fn embed_all(&self, seqs: &[LoadedSequence]) -> Result<EmbeddingSet> {
        let hd = self.config.head;
        let [h, w] = self.config.input_hw;
        let mut set = EmbeddingSet::new(hd.strips, hd.embed_dim);
        for s in seqs {
            let frames: Vec<f32> = s.pixels.iter().map(|&v| v as f32).collect();
            let t = Tensor::new(vec![s.len, 1, h, w], frames)?;
            set.push(s.id.clone(), &self.embed_sequence(t)?)?;
        }
        Ok(set)
    }

    /// Writes all parameters, followed by `extra` entries.
    pub fn save(&self, path: &Path, extra: &[(String, Tensor<f32>)]) -> Result<()> {
        let mut entries: Vec<(&str, &Tensor<f32>)> =
            self.params.iter().map(|p| (p.name.as_str(), &p.tensor)).collect();
        entries.extend(extra.iter().map(|(n, t)| (n.as_str(), t)));
        checkpoint::write(path, &entries)
    }

    /// Builds `config` and overwrites every parameter from the checkpoint.
    /// Entries that are not parameters are returned.
    pub fn load(config: ModelConfig, path: &Path) -> Result<(Model, Vec<(String, Tensor<f32>)>)> {
        let mut model = Model::build(config, 0)?;
        let entries = checkpoint::read(path)?;
        let extra = model.assign(path, entries)?;
        Ok((model, extra))
    }

    fn assign(&mut self, path: &Path, entries: Vec<(String, Tensor<f32>)>) -> Result<Vec<(String, Tensor<f32>)>> {
        let mut seen = vec![false; self.params.len()];
        let mut extra = Vec::new();
        for (name, t) in entries {
            match self.params.iter_mut().enumerate().find(|(_, p)| p.name == name) {
                Some((i, p)) => {
                    if p.tensor.shape() != t.shape() {
                        return Err(Error::format(
                            path,
                            format!("{name} has shape {:?}, model expects {:?}", t.shape(), p.tensor.shape()),
                        ));
                    }
                    p.tensor = Tensor::new(t.shape().to_vec(), t.into_data())?;
                    p.tensor.requires_grad = true;
                    seen[i] = true;
                }
                None => extra.push((name, t)),
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::format(
                path,
                format!("missing parameter {}", self.params.get(ParamId(i)).name),
            ));
        }
        Ok(extra)
    }
}
