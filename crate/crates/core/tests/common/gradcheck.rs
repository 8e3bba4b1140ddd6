//! Backward passes against central finite differences in f64.
//!
//! Every check reduces the layer output to a scalar with a fixed random
//! projection `L = Σ y·R`, so `dL/dy = R`, and compares the analytic
//! gradient with `(L(θ + h) − L(θ − h)) / 2h` coordinate by coordinate.

use sdpoint::downsample::{adaptive_avg_pool_backward, adaptive_avg_pool_forward};
use sdpoint::layers::{
    global_avg_pool_backward, global_avg_pool_forward, softmax_cross_entropy, BatchNorm, Block,
    BlockSpec, ChannelStats, Conv2d, ForwardCtx, Linear, NormMode, Param, StatsChoice,
};
use sdpoint::{Rng, Tensor4};

pub const TOL: f64 = 1e-5;
pub const H: f64 = 1e-6;
/// Coordinates checked per tensor; larger tensors are subsampled.
const MAX_COORDS: usize = 120;

pub struct Entry {
    pub name: String,
    /// Norm-based relative error over the checked coordinates.
    pub rel: f64,
    /// Norm of the difference.
    pub abs: f64,
}

#[derive(Default)]
pub struct Report {
    pub entries: Vec<Entry>,
}

impl Report {
    pub fn compare(
        &mut self,
        name: &str,
        idx: &[usize],
        analytic: &[f64],
        mut loss_at: impl FnMut(usize, f64) -> f64,
    ) {
        let mut diff = 0.0;
        let mut na = 0.0;
        let mut nn = 0.0;
        for &i in idx {
            let num = (loss_at(i, H) - loss_at(i, -H)) / (2.0 * H);
            diff += (analytic[i] - num).powi(2);
            na += analytic[i].powi(2);
            nn += num.powi(2);
        }
        let scale = na.sqrt().max(nn.sqrt());
        assert!(scale > 0.0, "{name}: gradient is identically zero");
        self.entries.push(Entry {
            name: name.to_string(),
            rel: diff.sqrt() / scale,
            abs: diff.sqrt(),
        });
    }

    pub fn worst(&self) -> Option<&Entry> {
        self.entries.iter().max_by(|a, b| a.rel.total_cmp(&b.rel))
    }

    /// Panics on the first entry at or above `tol` whose absolute error is
    /// also at or above `floor`.
    pub fn assert_within(&self, tol: f64, floor: f64) {
        assert!(!self.entries.is_empty());
        for e in &self.entries {
            assert!(
                e.rel < tol || e.abs < floor,
                "{}: relative error {:e}",
                e.name,
                e.rel
            );
        }
    }
}

pub fn random(shape: [usize; 4], rng: &mut Rng) -> Tensor4<f64> {
    let n = shape.iter().product();
    Tensor4::from_vec(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
}

pub fn project(y: &Tensor4<f64>, r: &Tensor4<f64>) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

pub fn coords(len: usize, rng: &mut Rng) -> Vec<usize> {
    if len <= MAX_COORDS {
        return (0..len).collect();
    }
    (0..MAX_COORDS)
        .map(|_| rng.uniform_choice(len).unwrap())
        .collect()
}

pub fn shifted(t: &Tensor4<f64>, i: usize, d: f64) -> Tensor4<f64> {
    let mut t = t.clone();
    t.data_mut()[i] += d;
    t
}

pub fn conv(
    rep: &mut Report,
    c_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    hw: usize,
) {
    let mut rng = Rng::new((c_in * 31 + k * 7 + stride) as u64);
    let mut conv = Conv2d::<f64>::new(c_in, c_out, k, stride, pad).unwrap();
    conv.init_he(&mut rng);
    let x = random([2, c_in, hw, hw], &mut rng);
    let (y, cache) = conv.forward(&x, true).unwrap();
    let r = random(y.dims(), &mut rng);
    let dx = conv.backward(&cache, &r).unwrap();
    let name = format!("conv {c_in}->{c_out} k{k} s{stride} p{pad}");
    let loss = |c: &Conv2d<f64>, x: &Tensor4<f64>| project(&c.forward(x, false).unwrap().0, &r);
    rep.compare(
        &format!("{name} dx"),
        &coords(x.len(), &mut rng),
        dx.data(),
        |i, d| loss(&conv, &shifted(&x, i, d)),
    );
    rep.compare(
        &format!("{name} dW"),
        &coords(conv.weight.len(), &mut rng),
        &conv.weight.grad,
        |i, d| {
            let mut c = conv.clone();
            c.weight.value[i] += d;
            loss(&c, &x)
        },
    );
}

pub fn conv_suite(rep: &mut Report) {
    conv(rep, 2, 3, 3, 1, 1, 5);
    conv(rep, 3, 2, 3, 2, 1, 6);
    conv(rep, 3, 4, 3, 2, 1, 7);
    conv(rep, 2, 3, 1, 2, 0, 5);
    conv(rep, 2, 2, 3, 1, 0, 4);
}

fn bn_with_affine(c: usize, rng: &mut Rng) -> BatchNorm<f64> {
    let mut bn = BatchNorm::<f64>::new(c, 0.1, 1e-5).unwrap();
    bn.gamma = Param::from_value((0..c).map(|_| 1.0 + 0.3 * rng.normal()).collect());
    bn.beta = Param::from_value((0..c).map(|_| 0.3 * rng.normal()).collect());
    bn
}

/// Batch statistics and fixed statistics.
pub fn batchnorm(rep: &mut Report) {
    for fixed in [false, true] {
        let mut rng = Rng::new(if fixed { 5 } else { 6 });
        let mut bn = bn_with_affine(3, &mut rng);
        let x = random([4, 3, 3, 3], &mut rng);
        let stats = ChannelStats::new(vec![0.2, -0.1, 0.4], vec![1.5, 0.7, 2.0]).unwrap();
        let choice = if fixed {
            StatsChoice::Fixed(&stats)
        } else {
            StatsChoice::Batch
        };
        let (y, cache, _) = bn.forward(&x, choice, true).unwrap();
        let r = random(y.dims(), &mut rng);
        let dx = bn.backward(&cache, &r).unwrap();
        let loss = |b: &BatchNorm<f64>, x: &Tensor4<f64>| {
            project(&b.forward(x, choice, false).unwrap().0, &r)
        };
        let tag = if fixed { "fixed" } else { "batch" };
        rep.compare(
            &format!("bn {tag} dx"),
            &coords(x.len(), &mut rng),
            dx.data(),
            |i, d| loss(&bn, &shifted(&x, i, d)),
        );
        rep.compare(
            &format!("bn {tag} dgamma"),
            &[0, 1, 2],
            &bn.gamma.grad,
            |i, d| {
                let mut b = bn.clone();
                b.gamma.value[i] += d;
                loss(&b, &x)
            },
        );
        rep.compare(
            &format!("bn {tag} dbeta"),
            &[0, 1, 2],
            &bn.beta.grad,
            |i, d| {
                let mut b = bn.clone();
                b.beta.value[i] += d;
                loss(&b, &x)
            },
        );
    }
}

pub fn linear(rep: &mut Report) {
    let mut rng = Rng::new(8);
    let mut fc = Linear::<f64>::new(5, 4).unwrap();
    fc.init_uniform(&mut rng);
    fc.bias = Param::from_value((0..4).map(|_| rng.normal()).collect());
    let x = random([3, 5, 1, 1], &mut rng);
    let (y, cache) = fc.forward(&x, true).unwrap();
    let r = random(y.dims(), &mut rng);
    let dx = fc.backward(&cache, &r).unwrap();
    let loss = |f: &Linear<f64>, x: &Tensor4<f64>| project(&f.forward(x, false).unwrap().0, &r);
    rep.compare(
        "linear dx",
        &coords(x.len(), &mut rng),
        dx.data(),
        |i, d| loss(&fc, &shifted(&x, i, d)),
    );
    rep.compare(
        "linear dW",
        &coords(20, &mut rng),
        &fc.weight.grad,
        |i, d| {
            let mut f = fc.clone();
            f.weight.value[i] += d;
            loss(&f, &x)
        },
    );
    rep.compare("linear db", &[0, 1, 2, 3], &fc.bias.grad, |i, d| {
        let mut f = fc.clone();
        f.bias.value[i] += d;
        loss(&f, &x)
    });
}

fn randomise_affine(block: &mut Block<f64>, rng: &mut Rng) {
    for bn in block.batch_norms_mut() {
        let c = bn.channels();
        bn.gamma = Param::from_value((0..c).map(|_| 1.0 + 0.3 * rng.normal()).collect());
        bn.beta = Param::from_value((0..c).map(|_| 0.3 * rng.normal()).collect());
    }
}

pub fn block(rep: &mut Report, spec: BlockSpec, hw: usize, seed: u64) {
    let mut rng = Rng::new(seed);
    let mut block = Block::<f64>::from_spec(&spec, 0.1, 1e-5, &mut rng).unwrap();
    randomise_affine(&mut block, &mut rng);
    let x = random([3, spec.in_channels(), hw, hw], &mut rng);
    let forward = |b: &Block<f64>, x: &Tensor4<f64>, keep: bool| {
        let mut ctx = ForwardCtx::new(NormMode::Batch, keep);
        b.forward(x, &mut ctx).unwrap()
    };
    let (y, cache) = forward(&block, &x, true);
    let r = random(y.dims(), &mut rng);
    let dx = block.backward(&cache, &r).unwrap();
    let loss = |b: &Block<f64>, x: &Tensor4<f64>| project(&forward(b, x, false).0, &r);
    let name = format!("{spec:?}");
    rep.compare(
        &format!("{name} dx"),
        &coords(x.len(), &mut rng),
        dx.data(),
        |i, d| loss(&block, &shifted(&x, i, d)),
    );
    let names: Vec<String> = block.params().iter().map(|(n, _, _)| n.clone()).collect();
    let grads: Vec<Vec<f64>> = block
        .params()
        .iter()
        .map(|(_, _, p)| p.grad.clone())
        .collect();
    for (t, (pname, grad)) in names.iter().zip(&grads).enumerate() {
        rep.compare(
            &format!("{name} {pname}"),
            &coords(grad.len(), &mut rng),
            grad,
            |i, d| {
                let mut b = block.clone();
                b.params_mut()[t].value[i] += d;
                loss(&b, &x)
            },
        );
    }
}

/// Identity and projection shortcuts.
pub fn residual_suite(rep: &mut Report) {
    block(
        rep,
        BlockSpec::Residual {
            in_channels: 3,
            out_channels: 3,
            stride: 1,
        },
        5,
        21,
    );
    block(
        rep,
        BlockSpec::Residual {
            in_channels: 2,
            out_channels: 4,
            stride: 2,
        },
        6,
        22,
    );
}

pub fn plain_block(rep: &mut Report) {
    block(
        rep,
        BlockSpec::Plain {
            in_channels: 2,
            out_channels: 3,
            stride: 2,
        },
        6,
        23,
    );
}

pub fn global_avg_pool(rep: &mut Report) {
    let mut rng = Rng::new(30);
    let x = random([2, 3, 5, 4], &mut rng);
    let y = global_avg_pool_forward(&x);
    let r = random(y.dims(), &mut rng);
    let dx = global_avg_pool_backward(x.shape(), &r).unwrap();
    rep.compare("gap dx", &coords(x.len(), &mut rng), dx.data(), |i, d| {
        project(&global_avg_pool_forward(&shifted(&x, i, d)), &r)
    });
}

pub fn adaptive_pool(rep: &mut Report) {
    let mut rng = Rng::new(31);
    for (h, w, oh, ow) in [
        (7, 7, 5, 5),
        (8, 6, 6, 3),
        (5, 5, 4, 4),
        (6, 6, 3, 3),
        (9, 7, 7, 5),
    ] {
        let x = random([2, 2, h, w], &mut rng);
        let (y, cache) = adaptive_avg_pool_forward(&x, oh, ow).unwrap();
        let r = random(y.dims(), &mut rng);
        let dx = adaptive_avg_pool_backward(&cache, &r).unwrap();
        rep.compare(
            &format!("pool {h}x{w}->{oh}x{ow}"),
            &coords(x.len(), &mut rng),
            dx.data(),
            |i, d| {
                project(
                    &adaptive_avg_pool_forward(&shifted(&x, i, d), oh, ow)
                        .unwrap()
                        .0,
                    &r,
                )
            },
        );
    }
}

pub fn softmax(rep: &mut Report) {
    let mut rng = Rng::new(32);
    let logits = random([4, 5, 1, 1], &mut rng);
    let labels = [0, 3, 4, 1];
    let (_, g) = softmax_cross_entropy(&logits, &labels).unwrap();
    rep.compare(
        "softmax ce",
        &coords(logits.len(), &mut rng),
        g.data(),
        |i, d| {
            softmax_cross_entropy(&shifted(&logits, i, d), &labels)
                .unwrap()
                .0
        },
    );
}
