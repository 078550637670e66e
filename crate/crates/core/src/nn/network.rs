//! Score networks built on the tape.
//!
//! Two architectures share one interface: a small two-or-more-resolution U-Net for
//! images and an elementwise MLP used for scalar toy problems. Parameters are stored
//! rounded to `f32`; all arithmetic runs in `f64`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::forward::{Dims, LogImage};
use crate::nn::embedding::time_embedding;
use crate::nn::tape::{Tape, Var};
use crate::nn::tensor::Tensor;
use crate::rng::{streams, RandomSource};
use crate::schedule::NoiseSchedule;
use crate::score::ScoreModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UNetConfig {
    pub channels: usize,
    pub base_width: usize,
    pub levels: usize,
    pub emb_dim: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            channels: 1,
            base_width: 32,
            levels: 2,
            emb_dim: 32,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MlpConfig {
    pub hidden: usize,
    pub emb_dim: usize,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            emb_dim: 16,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Architecture {
    UNet(UNetConfig),
    Mlp(MlpConfig),
}

/// What the raw network output means.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NetOutput {
    /// The score itself.
    Score,
    /// A noise estimate `e`; the score is `-e / sqrt(eta(k))`.
    NoisePrediction,
}

impl Architecture {
    pub fn output(&self) -> NetOutput {
        match self {
            Architecture::UNet(_) => NetOutput::NoisePrediction,
            Architecture::Mlp(_) => NetOutput::Score,
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        match *self {
            Architecture::UNet(c) => {
                if c.channels == 0 || c.base_width == 0 || c.levels == 0 {
                    return bad(format!("unet sizes must be positive: {c:?}"));
                }
                if c.levels > 6 {
                    return bad(format!("unet supports at most 6 levels, got {}", c.levels));
                }
                if c.emb_dim == 0 || c.emb_dim % 2 != 0 {
                    return bad(format!("embedding dimension must be even, got {}", c.emb_dim));
                }
            }
            Architecture::Mlp(c) => {
                if c.hidden == 0 {
                    return bad("mlp hidden width must be positive".into());
                }
                if c.emb_dim == 0 || c.emb_dim % 2 != 0 {
                    return bad(format!("embedding dimension must be even, got {}", c.emb_dim));
                }
            }
        }
        Ok(())
    }

    /// Spatial sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        match self {
            Architecture::UNet(c) => 1 << (c.levels - 1),
            Architecture::Mlp(_) => 1,
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Architecture::UNet(c) => write!(
                f,
                "unet channels={} base_width={} levels={} emb_dim={}",
                c.channels, c.base_width, c.levels, c.emb_dim
            ),
            Architecture::Mlp(c) => write!(f, "mlp hidden={} emb_dim={}", c.hidden, c.emb_dim),
        }
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split_whitespace();
        let kind = parts.next().unwrap_or("");
        let mut fields = std::collections::BTreeMap::new();
        for p in parts {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("bad architecture field '{p}'")))?;
            let v: usize = v
                .parse()
                .map_err(|_| Error::Config(format!("bad architecture value '{p}'")))?;
            fields.insert(k, v);
        }
        let mut take = |name: &str| {
            fields
                .remove(name)
                .ok_or_else(|| Error::Config(format!("architecture is missing '{name}'")))
        };
        let arch = match kind {
            "unet" => Architecture::UNet(UNetConfig {
                channels: take("channels")?,
                base_width: take("base_width")?,
                levels: take("levels")?,
                emb_dim: take("emb_dim")?,
            }),
            "mlp" => Architecture::Mlp(MlpConfig {
                hidden: take("hidden")?,
                emb_dim: take("emb_dim")?,
            }),
            other => return Err(Error::Config(format!("unknown architecture '{other}'"))),
        };
        if let Some(k) = fields.keys().next() {
            return Err(Error::Config(format!("unknown architecture field '{k}'")));
        }
        arch.validate()?;
        Ok(arch)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    FanIn(usize),
    Zero,
}

#[derive(Clone, Copy, Debug)]
struct Pair {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct ResBlock {
    conv1: Pair,
    emb: Pair,
    conv2: Pair,
}

#[derive(Clone, Debug)]
struct UNetLayout {
    input: Pair,
    down: Vec<ResBlock>,
    down_conv: Vec<Pair>,
    up_conv: Vec<Pair>,
    up: Vec<ResBlock>,
    out: Pair,
}

#[derive(Clone, Debug)]
struct MlpLayout {
    hidden: Pair,
    out: Pair,
}

#[derive(Clone, Debug)]
enum Layout {
    UNet(UNetLayout),
    Mlp(MlpLayout),
}

#[derive(Default)]
struct SpecBuilder {
    specs: Vec<(Vec<usize>, Init)>,
}

impl SpecBuilder {
    fn push(&mut self, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push((shape, init));
        self.specs.len() - 1
    }

    fn conv(&mut self, cin: usize, cout: usize, zero: bool) -> Pair {
        let init = if zero { Init::Zero } else { Init::FanIn(cin * 9) };
        Pair {
            w: self.push(vec![cout, cin, 3, 3], init),
            b: self.push(vec![cout], Init::Zero),
        }
    }

    fn linear(&mut self, nin: usize, nout: usize) -> Pair {
        Pair {
            w: self.push(vec![nin, nout], Init::FanIn(nin)),
            b: self.push(vec![nout], Init::Zero),
        }
    }

    fn res(&mut self, width: usize, emb: usize) -> ResBlock {
        ResBlock {
            conv1: self.conv(width, width, false),
            emb: self.linear(emb, width),
            conv2: self.conv(width, width, false),
        }
    }
}

fn build_layout(arch: &Architecture) -> (Layout, Vec<(Vec<usize>, Init)>) {
    let mut sb = SpecBuilder::default();
    let layout = match *arch {
        Architecture::UNet(c) => {
            let width = |l: usize| c.base_width << l;
            let input = sb.conv(c.channels, width(0), false);
            let mut down = Vec::new();
            let mut down_conv = Vec::new();
            for l in 0..c.levels {
                down.push(sb.res(width(l), c.emb_dim));
                if l + 1 < c.levels {
                    down_conv.push(sb.conv(width(l), width(l + 1), false));
                }
            }
            // Stored in decoder order, deepest first.
            let mut up_conv = Vec::new();
            let mut up = Vec::new();
            for l in (0..c.levels - 1).rev() {
                up_conv.push(sb.conv(width(l + 1) + width(l), width(l), false));
                up.push(sb.res(width(l), c.emb_dim));
            }
            let out = sb.conv(width(0), c.channels, true);
            Layout::UNet(UNetLayout {
                input,
                down,
                down_conv,
                up_conv,
                up,
                out,
            })
        }
        Architecture::Mlp(c) => {
            let hidden = sb.linear(1 + c.emb_dim, c.hidden);
            let out = Pair {
                w: sb.push(vec![c.hidden, 1], Init::Zero),
                b: sb.push(vec![1], Init::Zero),
            };
            Layout::Mlp(MlpLayout { hidden, out })
        }
    };
    (layout, sb.specs)
}

/// A score network: architecture plus its parameter tensors.
#[derive(Clone, Debug)]
pub struct Network {
    arch: Architecture,
    params: Vec<Tensor>,
    layout: Layout,
}

impl PartialEq for Network {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch && self.params == other.params
    }
}

impl Network {
    /// Fan-in uniform initialization for hidden layers, zeros for the output layer
    /// and all biases, so the initial score estimate is exactly zero.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let (layout, specs) = build_layout(&arch);
        let mut rng = RandomSource::new(seed, streams::INIT);
        let params = specs
            .into_iter()
            .map(|(shape, init)| {
                let mut t = Tensor::zeros(shape);
                if let Init::FanIn(fan_in) = init {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    for v in t.data_mut() {
                        *v = bound * (2.0 * rng.uniform() - 1.0);
                    }
                }
                t.round_to_f32();
                t
            })
            .collect();
        Ok(Self {
            arch,
            params,
            layout,
        })
    }

    /// Rebuilds a network from stored parameters, checking them against the layout.
    pub fn from_params(arch: Architecture, params: Vec<Tensor>) -> Result<Self> {
        arch.validate()?;
        let (layout, specs) = build_layout(&arch);
        if specs.len() != params.len() {
            return Err(Error::Contract(format!(
                "{arch} has {} parameter tensors, got {}",
                specs.len(),
                params.len()
            )));
        }
        for (i, ((shape, _), p)) in specs.iter().zip(&params).enumerate() {
            if p.shape() != shape.as_slice() {
                return Err(Error::Contract(format!(
                    "parameter {i} of {arch} should have shape {shape:?}, got {:?}",
                    p.shape()
                )));
            }
        }
        Ok(Self {
            arch,
            params,
            layout,
        })
    }

    pub fn arch(&self) -> Architecture {
        self.arch
    }

    pub fn output(&self) -> NetOutput {
        self.arch.output()
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Parameter count implied by an architecture, without allocating it.
    pub fn count_for(arch: &Architecture) -> usize {
        build_layout(arch)
            .1
            .iter()
            .map(|(s, _)| s.iter().product::<usize>())
            .sum()
    }

    pub fn round_params_to_f32(&mut self) {
        for p in &mut self.params {
            p.round_to_f32();
        }
    }

    /// Puts every parameter on the tape.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.clone(), trainable))
            .collect()
    }

    pub fn check_input(&self, dims: Dims) -> Result<()> {
        match self.arch {
            Architecture::UNet(c) => {
                let m = self.arch.size_multiple();
                if dims.channels != c.channels {
                    return Err(Error::Shape {
                        op: "network",
                        detail: format!("expected {} channels, got {}", c.channels, dims.channels),
                    });
                }
                if dims.height == 0 || dims.width == 0 || !dims.height.is_multiple_of(m) || !dims.width.is_multiple_of(m) {
                    return Err(Error::Shape {
                        op: "network",
                        detail: format!(
                            "spatial size {}x{} is not a positive multiple of {m}",
                            dims.height, dims.width
                        ),
                    });
                }
            }
            Architecture::Mlp(_) => {
                if dims.is_empty() {
                    return Err(Error::Shape {
                        op: "network",
                        detail: "empty input".into(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Raw network output for a `[N, C, H, W]` batch `y` with one step index per sample.
    pub fn forward(&self, tape: &mut Tape, params: &[Var], y: Var, ks: &[usize]) -> Result<Var> {
        if params.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "{} parameter handles for {} parameters",
                params.len(),
                self.params.len()
            )));
        }
        let shape = tape.value(y).shape().to_vec();
        let [n, c, h, w] = shape[..] else {
            return Err(Error::Shape {
                op: "network",
                detail: format!("expected [N, C, H, W], got {shape:?}"),
            });
        };
        if ks.len() != n {
            return Err(Error::Shape {
                op: "network",
                detail: format!("{n} samples but {} step indices", ks.len()),
            });
        }
        self.check_input(Dims::new(c, h, w))?;
        match &self.layout {
            Layout::UNet(l) => self.forward_unet(tape, params, l, y, ks),
            Layout::Mlp(l) => self.forward_mlp(tape, params, l, y, ks, c * h * w),
        }
    }

    fn embedding_matrix(ks: &[usize], dim: usize, repeat: usize) -> Result<Tensor> {
        let mut data = Vec::with_capacity(ks.len() * repeat * dim);
        for &k in ks {
            let e = time_embedding(k, dim)?;
            for _ in 0..repeat {
                data.extend_from_slice(&e);
            }
        }
        Tensor::new(vec![ks.len() * repeat, dim], data)
    }

    fn forward_unet(
        &self,
        tape: &mut Tape,
        p: &[Var],
        l: &UNetLayout,
        y: Var,
        ks: &[usize],
    ) -> Result<Var> {
        let Architecture::UNet(cfg) = self.arch else {
            unreachable!()
        };
        let emb = tape.constant(Self::embedding_matrix(ks, cfg.emb_dim, 1)?);
        let conv = |tape: &mut Tape, x: Var, c: Pair| tape.conv2d(x, p[c.w], p[c.b]);
        let res = |tape: &mut Tape, x: Var, r: &ResBlock| -> Result<Var> {
            let h = tape.channel_norm(x)?;
            let h = tape.silu(h);
            let h = conv(tape, h, r.conv1)?;
            let e = tape.matmul(emb, p[r.emb.w])?;
            let e = tape.add_row_bias(e, p[r.emb.b])?;
            let h = tape.add_channel(h, e)?;
            let h = tape.channel_norm(h)?;
            let h = tape.silu(h);
            let h = conv(tape, h, r.conv2)?;
            tape.add(x, h)
        };

        let mut h = conv(tape, y, l.input)?;
        let mut skips = Vec::new();
        for lvl in 0..cfg.levels {
            h = res(tape, h, &l.down[lvl])?;
            if lvl + 1 < cfg.levels {
                skips.push(h);
                h = tape.avgpool2(h)?;
                h = conv(tape, h, l.down_conv[lvl])?;
            }
        }
        for (i, skip) in skips.into_iter().rev().enumerate() {
            h = tape.upsample2(h)?;
            h = tape.concat(h, skip)?;
            h = conv(tape, h, l.up_conv[i])?;
            h = res(tape, h, &l.up[i])?;
        }
        let h = tape.channel_norm(h)?;
        let h = tape.silu(h);
        conv(tape, h, l.out)
    }

    fn forward_mlp(
        &self,
        tape: &mut Tape,
        p: &[Var],
        l: &MlpLayout,
        y: Var,
        ks: &[usize],
        per_sample: usize,
    ) -> Result<Var> {
        let Architecture::Mlp(cfg) = self.arch else {
            unreachable!()
        };
        let shape = tape.value(y).shape().to_vec();
        let total = tape.value(y).len();
        let emb = tape.constant(Self::embedding_matrix(ks, cfg.emb_dim, per_sample)?);
        let col = tape.reshape(y, &[total, 1])?;
        let feat = tape.concat(col, emb)?;
        let h = tape.matmul(feat, p[l.hidden.w])?;
        let h = tape.add_row_bias(h, p[l.hidden.b])?;
        let h = tape.silu(h);
        let o = tape.matmul(h, p[l.out.w])?;
        let o = tape.add_row_bias(o, p[l.out.b])?;
        tape.reshape(o, &shape)
    }

    /// Raw outputs for a batch of equally sized images.
    pub fn evaluate_raw(&self, ys: &[LogImage], ks: &[usize]) -> Result<Vec<Vec<f64>>> {
        if ys.is_empty() {
            return Ok(Vec::new());
        }
        let dims = ys[0].dims();
        if let Some(bad) = ys.iter().find(|y| y.dims() != dims) {
            return Err(Error::Shape {
                op: "network",
                detail: format!("mixed batch dims {:?} and {:?}", dims, bad.dims()),
            });
        }
        let mut data = Vec::with_capacity(ys.len() * dims.len());
        for y in ys {
            data.extend_from_slice(y.data());
        }
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let x = tape.constant(Tensor::new(
            vec![ys.len(), dims.channels, dims.height, dims.width],
            data,
        )?);
        let out = self.forward(&mut tape, &params, x, ks)?;
        Ok(tape
            .value(out)
            .data()
            .chunks(dims.len())
            .map(<[f64]>::to_vec)
            .collect())
    }

    /// Raw output for one image.
    pub fn evaluate(&self, y: &LogImage, k: usize) -> Result<Vec<f64>> {
        Ok(self.evaluate_raw(std::slice::from_ref(y), &[k])?.remove(0))
    }

    pub fn score_model<'a>(&'a self, schedule: &'a NoiseSchedule) -> NetworkScore<'a> {
        NetworkScore {
            net: self,
            schedule,
        }
    }
}

/// Converts a raw output at step `k` into a score.
pub fn output_to_score(kind: NetOutput, raw: &mut [f64], k: usize, schedule: &NoiseSchedule) -> Result<()> {
    if let NetOutput::NoisePrediction = kind {
        let eta = schedule.eta(k)?;
        if eta <= 0.0 {
            return Err(Error::DegenerateKernel(format!(
                "a noise-prediction network has no score at zero variance (k = {k})"
            )));
        }
        let inv = -1.0 / eta.sqrt();
        raw.iter_mut().for_each(|v| *v *= inv);
    }
    Ok(())
}

/// A [`Network`] bound to the schedule it was trained with.
#[derive(Clone, Copy, Debug)]
pub struct NetworkScore<'a> {
    pub net: &'a Network,
    pub schedule: &'a NoiseSchedule,
}

impl ScoreModel for NetworkScore<'_> {
    fn score(&self, y: &LogImage, k: usize) -> Result<Vec<f64>> {
        Ok(self.score_batch(std::slice::from_ref(y), &[k])?.remove(0))
    }

    fn score_batch(&self, ys: &[LogImage], ks: &[usize]) -> Result<Vec<Vec<f64>>> {
        if ys.len() != ks.len() {
            return Err(Error::Shape {
                op: "score_batch",
                detail: format!("{} states but {} step indices", ys.len(), ks.len()),
            });
        }
        for &k in ks {
            self.schedule.eta(k)?;
        }
        let mut out = self.net.evaluate_raw(ys, ks)?;
        for (o, &k) in out.iter_mut().zip(ks) {
            output_to_score(self.net.output(), o, k, self.schedule)?;
        }
        Ok(out)
    }
}
