//! Gradient and invariant suites behind `cfaug selftest`.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::{ascend_target_ages, init_target_ages, make_store, select_hard, select_hard_oracle, InitPolicy};
use crate::autodiff::{Tape, Tensor, Var};
use crate::encoding::{Diagnosis, FourierEncoder};
use crate::error::Result;
use crate::models::{AnalyticGenerator, ClassifierConfig, ClassifierModel, Example, NeuralGenerator};
use crate::synthworld::{render, render_row, sample_dataset, DatasetSpec, LatentRanges, RenderConfig};

/// Primitive and model gradients must agree with finite differences to this
/// relative error.
pub const GRAD_TOL: f64 = 1e-6;
/// Looser bound for the renderer's age derivative.
pub const RENDER_TOL: f64 = 1e-5;
const H: f64 = 1e-5;
/// Gradients below this magnitude are compared on an absolute scale.
const FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Largest error seen, relative unless stated otherwise.
    pub worst: f64,
    pub tolerance: f64,
    /// Pass/fail only; `worst` and `tolerance` carry no magnitude.
    pub exact: bool,
}

impl Check {
    fn new(name: &str, worst: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            passed: worst < tolerance,
            worst,
            tolerance,
            exact: false,
        }
    }

    fn exact(name: &str, ok: bool) -> Self {
        Self {
            name: name.into(),
            passed: ok,
            worst: if ok { 0.0 } else { 1.0 },
            tolerance: 0.5,
            exact: true,
        }
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FLOOR)
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

/// Worst relative error between the tape gradient of a scalar function of
/// `inputs` and finite differences, over every input coordinate.
fn grad_error(inputs: &[Tensor], f: &dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>) -> f64 {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let root = f(&tape, &vars);
    let grads = tape.backward(root).expect("backward");
    let value = |xs: &[Tensor]| {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        f(&tape, &vars).item()
    };
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let g = grads.wrt(*v).expect("gradient");
        for i in 0..inputs[k].len() {
            let at = |dx: f64| {
                let mut xs = inputs.to_vec();
                xs[k].data_mut()[i] += dx;
                value(&xs)
            };
            // Five-point stencil; high-frequency features defeat the plain
            // central difference.
            let fd = (8.0 * (at(H) - at(-H)) - (at(2.0 * H) - at(-2.0 * H))) / (12.0 * H);
            worst = worst.max(rel_err(g.data()[i], fd));
        }
    }
    worst
}

/// Projects onto fixed random weights so every output coordinate matters.
fn project<'t>(tape: &'t Tape, x: Var<'t>, seed: u64) -> Var<'t> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = x.shape();
    let w = random(&mut rng, &shape, -1.0, 1.0);
    x.mul(tape.leaf(w)).and_then(|y| y.sum()).expect("projection")
}

pub fn gradient_suite() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut out = Vec::new();
    type Unary = for<'t> fn(Var<'t>) -> Var<'t>;
    let unary: [(&str, Unary, f64, f64); 9] = [
        ("relu", |x| x.relu().unwrap(), 0.1, 2.0),
        ("relu (negative side)", |x| x.relu().unwrap(), -2.0, -0.1),
        ("sigmoid", |x| x.sigmoid().unwrap(), -3.0, 3.0),
        ("sin", |x| x.sin().unwrap(), -3.0, 3.0),
        ("cos", |x| x.cos().unwrap(), -3.0, 3.0),
        ("tanh", |x| x.tanh().unwrap(), -2.0, 2.0),
        ("affine", |x| x.affine(-1.5, 0.3).unwrap(), -2.0, 2.0),
        (
            "reshape",
            |x| x.reshape(vec![6]).unwrap().reshape(vec![2, 3]).unwrap(),
            -2.0,
            2.0,
        ),
        ("mean", |x| x.mean().unwrap(), -2.0, 2.0),
    ];
    for (name, op, lo, hi) in unary {
        let mut worst: f64 = 0.0;
        for t in 0..5 {
            let x = random(&mut rng, &[3, 2], lo, hi);
            worst = worst.max(grad_error(&[x], &|tape, v| project(tape, op(v[0]), t)));
        }
        out.push(Check::new(name, worst, GRAD_TOL));
    }
    let mut worst = [0.0f64; 4];
    for t in 0..5 {
        let a = random(&mut rng, &[3, 4], -2.0, 2.0);
        let b = random(&mut rng, &[3, 4], -2.0, 2.0);
        let m = random(&mut rng, &[4, 2], -2.0, 2.0);
        worst[0] = worst[0].max(grad_error(&[a.clone(), b.clone()], &|tape, v| {
            project(tape, v[0].add(v[1]).unwrap(), t)
        }));
        worst[1] = worst[1].max(grad_error(&[a.clone(), b.clone()], &|tape, v| {
            project(tape, v[0].mul(v[1]).unwrap(), t)
        }));
        worst[2] = worst[2].max(grad_error(&[a.clone(), m], &|tape, v| {
            project(tape, v[0].matmul(v[1]).unwrap(), t)
        }));
        worst[3] = worst[3].max(grad_error(&[a, b], &|tape, v| {
            let rows = project(tape, tape.concat(&[v[0], v[1]], 0).unwrap(), t);
            let cols = project(tape, tape.concat(&[v[1], v[0], v[1]], 1).unwrap(), t + 1);
            rows.add(cols).unwrap()
        }));
    }
    for (name, w) in ["add", "mul", "matmul", "concat"].into_iter().zip(worst) {
        out.push(Check::new(name, w, GRAD_TOL));
    }
    let mut bce: f64 = 0.0;
    for _ in 0..5 {
        let p = random(&mut rng, &[6], 0.05, 0.95);
        let y = Tensor::vector((0..6).map(|i| (i % 2) as f64).collect());
        bce = bce.max(grad_error(&[p], &|_, v| v[0].bce_loss(&y).unwrap()));
    }
    out.push(Check::new("bce", bce, GRAD_TOL));

    // Fourier encoding, as a function of v.
    let enc = FourierEncoder::new(16, 2, 10.0, 4).expect("encoder");
    let mut worst: f64 = 0.0;
    for t in 0..5 {
        let v = random(&mut rng, &[1, 2], 0.0, 1.0);
        worst = worst.max(grad_error(&[v], &|tape, x| project(tape, enc.encode(x[0]).unwrap(), t)));
    }
    out.push(Check::new("fourier encoding", worst, GRAD_TOL));

    // Renderer, as a function of age.
    let cfg = RenderConfig::default();
    let mut worst: f64 = 0.0;
    for t in 0..10 {
        let latent = LatentRanges::default().sample(&mut rng);
        let a = rng.gen_range(58.0..95.0);
        let d = if t % 2 == 0 { Diagnosis::Cn } else { Diagnosis::Ad };
        let w = random(&mut rng, &[1, cfg.pixels()], -1.0, 1.0);
        let tape = Tape::new();
        let age = tape.scalar(a);
        let root = render_row(&cfg, &latent, age, d)
            .unwrap()
            .mul(tape.leaf(w.clone()))
            .unwrap()
            .sum()
            .unwrap();
        let g = tape.backward(root).unwrap().wrt(age).unwrap().item();
        let f = |x: f64| -> f64 {
            let img = render(&cfg, &latent, x, d).unwrap();
            img.data().iter().zip(w.data()).map(|(p, q)| p * q).sum()
        };
        let fd = (f(a + H) - f(a - H)) / (2.0 * H);
        worst = worst.max(rel_err(g, fd));
    }
    out.push(Check::new("renderer age gradient", worst, RENDER_TOL));

    // Classifier: bce over a small batch, w.r.t. every parameter.
    let model = ClassifierModel::new(
        16,
        &ClassifierConfig {
            hidden: vec![6, 5],
            zero_last: false,
        },
        3,
    )
    .expect("classifier");
    let images: Vec<Vec<f64>> = (0..4)
        .map(|_| (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let labels: Vec<f64> = vec![0.0, 1.0, 1.0, 0.0];
    let batch: Vec<Example> = images
        .iter()
        .zip(&labels)
        .map(|(i, &l)| Example { image: i, label: l })
        .collect();
    let (_, grads) = model.loss_and_grads(&batch).expect("grads");
    let x = Tensor::from_rows(&images).expect("rows");
    let y = Tensor::vector(labels.clone());
    let params: Vec<Tensor> = model.net.params().into_iter().cloned().collect();
    let fd_worst = params_fd(&params, &grads, &|ps| {
        let tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = model.forward(&vars, tape.leaf(x.clone())).unwrap();
        out.bce_loss(&y).unwrap().item()
    });
    out.push(Check::new("classifier backward", fd_worst, GRAD_TOL));

    // Neural generator: projected output w.r.t. every parameter.
    let enc = FourierEncoder::new(4, 2, 1.0, 5).expect("encoder");
    let gen = NeuralGenerator::new(enc, &[6], 4, 6).expect("generator");
    let latents: Vec<_> = (0..2).map(|_| LatentRanges::default().sample(&mut rng)).collect();
    let ages = [66.0, 81.0];
    let diags = [Diagnosis::Cn, Diagnosis::Ad];
    let gparams: Vec<Tensor> = gen.net.params().into_iter().cloned().collect();
    let eval = |ps: &[Tensor], want_grads: bool| -> (f64, Vec<Tensor>) {
        let tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
        let v = NeuralGenerator::conditions(&tape, &ages, &diags).unwrap();
        let out = gen.forward_with(&vars, v, &latents).unwrap();
        let root = project(&tape, out, 99);
        let value = root.item();
        if !want_grads {
            return (value, Vec::new());
        }
        let g = tape.backward(root).unwrap();
        (value, vars.iter().map(|&p| g.wrt(p).unwrap()).collect())
    };
    let (_, ggrads) = eval(&gparams, true);
    let fd_worst = params_fd(&gparams, &ggrads, &|ps| eval(ps, false).0);
    out.push(Check::new("generator backward", fd_worst, GRAD_TOL));
    out
}

fn params_fd(params: &[Tensor], grads: &[Tensor], f: &dyn Fn(&[Tensor]) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    for (k, p) in params.iter().enumerate() {
        for i in 0..p.len() {
            let mut plus = params.to_vec();
            plus[k].data_mut()[i] += H;
            let mut minus = params.to_vec();
            minus[k].data_mut()[i] -= H;
            let fd = (f(&plus) - f(&minus)) / (2.0 * H);
            worst = worst.max(rel_err(grads[k].data()[i], fd));
        }
    }
    worst
}

pub fn invariant_suite() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(23);

    let enc = FourierEncoder::new(100, 2, 10.0, 1)?;
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let v = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
        let g = enc.encode_value(&v)?;
        worst = worst.max((g.iter().map(|x| x * x).sum::<f64>() - 100.0).abs());
    }
    out.push(Check::new("fourier norm equals m (absolute)", worst, 1e-9));

    // d/dv0 of p cos(2 pi b.v) and p sin(2 pi b.v), one output at a time.
    let (m, d) = (enc.params().m, enc.params().d);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let v = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        for i in 0..2 * m {
            let j = i / 2;
            let b = &enc.basis().data()[j * d..(j + 1) * d];
            let x = 2.0 * PI * (b[0] * v[0] + b[1] * v[1]);
            let scale = 2.0 * PI * b[0] * enc.coeffs()[j];
            let closed = if i % 2 == 0 { -scale * x.sin() } else { scale * x.cos() };
            let tape = Tape::new();
            let var = tape.leaf(Tensor::vector(v.to_vec()));
            let mut pick = vec![0.0; 2 * m];
            pick[i] = 1.0;
            let root = enc.encode(var)?.mul(tape.leaf(Tensor::vector(pick)))?.sum()?;
            let g = tape.backward(root)?.wrt(var)?.data()[0];
            worst = worst.max(rel_err(g, closed));
        }
    }
    out.push(Check::new("fourier closed-form derivative", worst, 1e-10));

    let cfg = RenderConfig::default();
    let mut same = true;
    for _ in 0..50 {
        let l = LatentRanges::default().sample(&mut rng);
        let a = rng.gen_range(60.0..90.0);
        same &= render(&cfg, &l, a, Diagnosis::Ad)? == render(&cfg, &l, a + cfg.ad_acceleration, Diagnosis::Cn)?;
    }
    out.push(Check::exact("AD render equals CN render delta years older", same));

    let mut agree = true;
    for _ in 0..100 {
        let n = rng.gen_range(1..40);
        let losses: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..6) as f64) * 0.5).collect();
        let ids: Vec<usize> = (0..n).map(|i| i * 7 % 101).collect();
        let k = rng.gen_range(1..=n);
        let oracle = select_hard_oracle(&losses, &ids, k);
        let mut sorted: Vec<usize> = (0..n).collect();
        sorted.sort_by(|&a, &b| losses[b].total_cmp(&losses[a]).then(ids[a].cmp(&ids[b])));
        agree &= sorted[..k] == oracle[..];
    }
    out.push(Check::exact("hard selection matches a full sort", agree));

    // One round of ascent on a small pretrained world.
    let render_cfg = RenderConfig {
        size: 8,
        ad_acceleration: 30.0,
        ..Default::default()
    };
    let data = sample_dataset(&DatasetSpec::balanced(10, 0, 0, 4), &render_cfg)?;
    let model = ClassifierModel::new(64, &ClassifierConfig::default(), 2)?;
    let idx = select_hard(&model, &data.train, 20)?;
    let mut state = init_target_ages(&data.train, &idx, InitPolicy::UniformToMax, [60.0, 90.0], &mut rng);
    let gen = AnalyticGenerator { render: render_cfg };
    let rec = ascend_target_ages(&mut state, &data.train, &gen, &model, 0.5, [60.0, 90.0])?;
    out.push(Check::exact(
        "ascent steps follow the gradient and stay in bounds",
        rec.ascent_ok == rec.steps.len() && rec.in_bounds,
    ));

    let store = make_store(&data.train, 100.0, 9)?;
    out.push(Check::exact("a 100% store is the train split", store == data.train));
    Ok(out)
}
