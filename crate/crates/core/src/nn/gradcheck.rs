//! Central finite-difference checks of tape gradients.

use crate::error::Result;
use crate::nn::network::{Architecture, Network, UNetConfig};
use crate::nn::tape::{Tape, Var};
use crate::nn::tensor::Tensor;
use crate::rng::{streams, RandomSource};

pub const FD_STEP: f64 = 1e-4;
/// Gradients below this magnitude are compared absolutely rather than relatively.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Scale,
    Square,
    Sum,
    Mean,
    Silu,
    Relu,
    MatMul,
    AddRowBias,
    Conv2d,
    AvgPool2,
    Upsample2,
    ChannelNorm,
    AddChannel,
    Concat,
    Reshape,
}

impl Primitive {
    pub const ALL: [Primitive; 18] = [
        Primitive::Add,
        Primitive::Sub,
        Primitive::Mul,
        Primitive::Scale,
        Primitive::Square,
        Primitive::Sum,
        Primitive::Mean,
        Primitive::Silu,
        Primitive::Relu,
        Primitive::MatMul,
        Primitive::AddRowBias,
        Primitive::Conv2d,
        Primitive::AvgPool2,
        Primitive::Upsample2,
        Primitive::ChannelNorm,
        Primitive::AddChannel,
        Primitive::Concat,
        Primitive::Reshape,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Scale => "scale",
            Primitive::Square => "square",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::Silu => "silu",
            Primitive::Relu => "relu",
            Primitive::MatMul => "matmul",
            Primitive::AddRowBias => "add_row_bias",
            Primitive::Conv2d => "conv2d",
            Primitive::AvgPool2 => "avgpool2",
            Primitive::Upsample2 => "upsample2",
            Primitive::ChannelNorm => "channel_norm",
            Primitive::AddChannel => "add_channel",
            Primitive::Concat => "concat",
            Primitive::Reshape => "reshape",
        }
    }
}

/// Worst relative discrepancy between tape and finite-difference gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
}

fn random_tensor(rng: &mut RandomSource, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, rng.normal_vec(n)).expect("shape matches")
}

/// Compares gradients of `sum(f(inputs) * r)` for a fixed random `r`.
pub fn check_fn<F>(inputs: &[Tensor], seed: u64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut rng = RandomSource::new(seed, streams::VERIFY);
    let eval = |inputs: &[Tensor], weights: Option<&Tensor>, grad: bool| -> Result<(Tape, Vec<Var>, Var, Tensor)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), grad)).collect();
        let out = f(&mut tape, &vars)?;
        let w = match weights {
            Some(w) => w.clone(),
            None => Tensor::zeros(tape.value(out).shape().to_vec()),
        };
        let wv = tape.constant(w.clone());
        let prod = tape.mul(out, wv)?;
        let loss = tape.sum(prod);
        Ok((tape, vars, loss, w))
    };
    // First pass only learns the output shape.
    let (_, _, _, shape_probe) = eval(inputs, None, false)?;
    let weights = random_tensor(&mut rng, shape_probe.shape().to_vec());
    let (mut tape, vars, loss, _) = eval(inputs, Some(&weights), true)?;
    tape.backward(loss)?;

    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut probe = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = tape
            .grad(*v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        for j in 0..inputs[i].len() {
            let orig = probe[i].data()[j];
            probe[i].data_mut()[j] = orig + FD_STEP;
            let (t, _, l, _) = eval(&probe, Some(&weights), false)?;
            let up = t.value(l).item()?;
            probe[i].data_mut()[j] = orig - FD_STEP;
            let (t, _, l, _) = eval(&probe, Some(&weights), false)?;
            let down = t.value(l).item()?;
            probe[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    Ok(GradCheck {
        max_rel_error: worst,
        checked,
    })
}

/// Checks one primitive on random shapes and values derived from `seed`.
pub fn check_primitive(p: Primitive, seed: u64) -> Result<GradCheck> {
    let mut rng = RandomSource::new(seed, streams::VERIFY).fork(streams::VERIFY + 100);
    let mut dim = |lo: usize, hi: usize| rng.uniform_inclusive(lo, hi);
    let (n, c, h, w) = (dim(1, 2), dim(1, 3), 2 * dim(1, 3), 2 * dim(1, 3));
    let (m, k, q) = (dim(1, 4), dim(1, 4), dim(1, 4));
    let mut rng = RandomSource::new(seed, streams::VERIFY).fork(streams::VERIFY + 200);
    let mut t = |shape: Vec<usize>| random_tensor(&mut rng, shape);
    let img = vec![n, c, h, w];
    match p {
        Primitive::Add => check_fn(&[t(img.clone()), t(img)], seed, |tp, v| tp.add(v[0], v[1])),
        Primitive::Sub => check_fn(&[t(img.clone()), t(img)], seed, |tp, v| tp.sub(v[0], v[1])),
        Primitive::Mul => check_fn(&[t(img.clone()), t(img)], seed, |tp, v| tp.mul(v[0], v[1])),
        Primitive::Scale => check_fn(&[t(img)], seed, |tp, v| Ok(tp.scale(v[0], -1.7))),
        Primitive::Square => check_fn(&[t(img)], seed, |tp, v| Ok(tp.square(v[0]))),
        Primitive::Sum => check_fn(&[t(img)], seed, |tp, v| Ok(tp.sum(v[0]))),
        Primitive::Mean => check_fn(&[t(img)], seed, |tp, v| tp.mean(v[0])),
        Primitive::Silu => check_fn(&[t(img)], seed, |tp, v| Ok(tp.silu(v[0]))),
        Primitive::Relu => {
            // Keep inputs away from the kink so finite differences are meaningful.
            let mut x = t(img);
            for v in x.data_mut() {
                if v.abs() < 0.05 {
                    *v += 0.1f64.copysign(*v);
                }
            }
            check_fn(&[x], seed, |tp, v| Ok(tp.relu(v[0])))
        }
        Primitive::MatMul => check_fn(&[t(vec![m, k]), t(vec![k, q])], seed, |tp, v| {
            tp.matmul(v[0], v[1])
        }),
        Primitive::AddRowBias => check_fn(&[t(vec![m, q]), t(vec![q])], seed, |tp, v| {
            tp.add_row_bias(v[0], v[1])
        }),
        Primitive::Conv2d => check_fn(
            &[t(img), t(vec![k, c, 3, 3]), t(vec![k])],
            seed,
            |tp, v| tp.conv2d(v[0], v[1], v[2]),
        ),
        Primitive::AvgPool2 => check_fn(&[t(img)], seed, |tp, v| tp.avgpool2(v[0])),
        Primitive::Upsample2 => check_fn(&[t(img)], seed, |tp, v| tp.upsample2(v[0])),
        Primitive::ChannelNorm => check_fn(&[t(img)], seed, |tp, v| tp.channel_norm(v[0])),
        Primitive::AddChannel => check_fn(&[t(img), t(vec![n, c])], seed, |tp, v| {
            tp.add_channel(v[0], v[1])
        }),
        Primitive::Concat => check_fn(&[t(img), t(vec![n, k, h, w])], seed, |tp, v| {
            tp.concat(v[0], v[1])
        }),
        Primitive::Reshape => check_fn(&[t(img)], seed, move |tp, v| {
            tp.reshape(v[0], &[n * c, h * w])
        }),
    }
}

/// Full pass of a small U-Net with every parameter randomized (including the
/// zero-initialized output layer), checked against the input and all parameters.
pub fn check_network(seed: u64) -> Result<GradCheck> {
    let arch = Architecture::UNet(UNetConfig {
        channels: 1,
        base_width: 2,
        levels: 2,
        emb_dim: 4,
    });
    let net = Network::new(arch, seed)?;
    let mut rng = RandomSource::new(seed, streams::VERIFY).fork(streams::VERIFY + 300);
    let mut inputs = vec![random_tensor(&mut rng, vec![2, 1, 4, 4])];
    for p in net.params() {
        let mut t = random_tensor(&mut rng, p.shape().to_vec());
        t.data_mut().iter_mut().for_each(|v| *v *= 0.5);
        inputs.push(t);
    }
    let ks = [rng.uniform_inclusive(1, 500), rng.uniform_inclusive(1, 500)];
    check_fn(&inputs, seed, |tp, v| net.forward(tp, &v[1..], v[0], &ks))
}
