//! Randomized finite-difference checks of reverse-mode gradients in f64.
//!
//! Each case draws random inputs, reduces the output to `Σ y·r` for a fixed
//! random `r`, and compares the tape gradient with central differences. The
//! [`suite`] covers every tape operation, every loss on raw inputs, every loss
//! composed through small random networks and the assembled per-step
//! generator and discriminator objectives.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::decgan::{
    adversarial_d_loss, adversarial_g_loss, assemble, assemble_z_bonefree, assemble_z_process, cycle_loss_d,
    cycle_loss_x, decomposition_loss, mask_loss, reconstruct, soft_mask, AdversarialForm, ComponentWeights, DecGan,
    DecGanConfig, LatentMaps, LatentSource, SoftMask,
};
use crate::nn::{Bound, Network};
use crate::rng::{stream, Rng};
use crate::tensor::{Activation, BinaryOp, ReduceOp, ScalarOp, Tape, Tensor, Var};

pub const INSTANCES: u64 = 20;
pub const TOLERANCE: f64 = 1e-6;
pub const STEP: f64 = 1e-5;
/// Coordinates checked per instance, spread over the inputs; larger tensors
/// are subsampled.
const COORD_BUDGET: usize = 256;

type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Var;

fn uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values with magnitude in [0.1, 1] and random sign, away from kinks at 0.
fn signed(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Scalar objective `Σ y·r` for a fixed random `r`, so every output element
/// contributes.
fn objective(tape: &mut Tape<f64>, y: Var, r: &Tensor<f64>) -> Var {
    let rv = tape.constant(r);
    let p = tape.mul(y, rv).unwrap();
    tape.reduce(p, ReduceOp::Sum).unwrap()
}

fn eval(inputs: &[Tensor<f64>], f: &Build, r: &Tensor<f64>) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t)).collect();
    let y = f(&mut tape, &vars);
    let l = objective(&mut tape, y, r);
    tape.item(l).unwrap()
}

/// Norm-wise relative error `‖g − ĝ‖ / max(‖g‖, ‖ĝ‖)` between the analytic
/// gradient and central differences, over the checked coordinates of all
/// inputs together.
fn check(inputs: Vec<Tensor<f64>>, f: &Build, seed: u64) -> f64 {
    let mut rng = stream(seed, 99);
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t)).collect();
    let y = f(&mut tape, &vars);
    let shape = tape.shape(y).to_vec();
    let r = uniform(&mut rng, &shape, 0.5, 1.5);
    let l = objective(&mut tape, y, &r);
    tape.backward(l).unwrap();
    let per_input = (COORD_BUDGET / inputs.len()).max(4);
    let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
    for (i, &v) in vars.iter().enumerate() {
        let n = inputs[i].numel();
        let analytic = tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        let coords: Vec<usize> = if n <= per_input {
            (0..n).collect()
        } else {
            (0..per_input).map(|_| rng.random_range(0..n)).collect()
        };
        for j in coords {
            let mut x = inputs.clone();
            x[i].data_mut()[j] += STEP;
            let up = eval(&x, f, &r);
            x[i].data_mut()[j] -= 2.0 * STEP;
            let down = eval(&x, f, &r);
            let numeric = (up - down) / (2.0 * STEP);
            diff += (numeric - analytic[j]) * (numeric - analytic[j]);
            na += analytic[j] * analytic[j];
            nn += numeric * numeric;
        }
    }
    let scale = libm::sqrt(na).max(libm::sqrt(nn));
    if scale == 0.0 {
        0.0
    } else {
        libm::sqrt(diff) / scale
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub name: String,
    pub instances: u64,
    /// Worst norm-wise relative error over the instances.
    pub worst: f64,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.worst < TOLERANCE && self.instances >= INSTANCES
    }
}

fn run_case(name: &str, case: impl Fn(&mut Rng) -> (Vec<Tensor<f64>>, Box<Build>)) -> CaseResult {
    let salt = name
        .bytes()
        .fold(0u64, |h, b| h.wrapping_mul(131).wrapping_add(u64::from(b)));
    let mut worst = 0.0f64;
    for k in 0..INSTANCES {
        let mut rng = stream(k, salt);
        let (inputs, f) = case(&mut rng);
        let e = check(inputs, &*f, k);
        // NaN must not hide behind `max`.
        worst = if e.is_nan() { f64::NAN } else { worst.max(e) };
    }
    CaseResult {
        name: name.to_string(),
        instances: INSTANCES,
        worst,
    }
}

fn img(rng: &mut Rng) -> [usize; 4] {
    [
        rng.random_range(1..3),
        rng.random_range(1..4),
        rng.random_range(3..7),
        rng.random_range(3..7),
    ]
}

/// Every tape operation on random shapes.
pub fn primitive_cases() -> Vec<CaseResult> {
    let mut out = Vec::new();
    for (stride, pad, k) in [(1, 1, 3), (2, 1, 4), (1, 0, 1), (2, 0, 3)] {
        let name = format!("conv2d k{k} s{stride} p{pad}");
        out.push(run_case(&name, move |rng| {
            let s = img(rng);
            let shape = [s[0], s[1], s[2] + k, s[3] + k];
            let o = rng.random_range(1..4);
            let x = uniform(rng, &shape, -1.0, 1.0);
            let w = uniform(rng, &[o, s[1], k, k], -1.0, 1.0);
            (
                vec![x, w],
                Box::new(move |t: &mut Tape<f64>, v: &[Var]| t.conv2d(v[0], v[1], stride, pad).unwrap()),
            )
        }));
    }
    out.push(run_case("add_bias", |rng| {
        let s = img(rng);
        (
            vec![uniform(rng, &s, -1.0, 1.0), uniform(rng, &[s[1]], -1.0, 1.0)],
            Box::new(|t: &mut Tape<f64>, v: &[Var]| t.add_bias(v[0], v[1]).unwrap()),
        )
    }));
    out.push(run_case("upsample_nearest2x", |rng| {
        let s = img(rng);
        (
            vec![uniform(rng, &s, -1.0, 1.0)],
            Box::new(|t: &mut Tape<f64>, v: &[Var]| t.upsample_nearest2x(v[0]).unwrap()),
        )
    }));
    for (name, act) in [
        ("relu", Activation::Relu),
        ("leaky_relu", Activation::LeakyRelu { slope: 0.2 }),
        ("sigmoid", Activation::Sigmoid),
        ("tanh", Activation::Tanh),
    ] {
        out.push(run_case(name, move |rng| {
            let s = img(rng);
            (
                vec![signed(rng, &s)],
                Box::new(move |t: &mut Tape<f64>, v: &[Var]| t.activate(v[0], act).unwrap()),
            )
        }));
    }
    for (name, op) in [
        ("add", BinaryOp::Add),
        ("sub", BinaryOp::Sub),
        ("mul", BinaryOp::Mul),
        ("div", BinaryOp::Div),
    ] {
        out.push(run_case(name, move |rng| {
            let s = img(rng);
            (
                vec![signed(rng, &s), signed(rng, &s)],
                Box::new(move |t: &mut Tape<f64>, v: &[Var]| t.binary(v[0], v[1], op).unwrap()),
            )
        }));
    }
    for (name, op) in [
        ("scalar add", ScalarOp::Add),
        ("scalar sub", ScalarOp::Sub),
        ("scalar rsub", ScalarOp::RSub),
        ("scalar mul", ScalarOp::Mul),
        ("scalar div", ScalarOp::Div),
    ] {
        out.push(run_case(name, move |rng| {
            let s = img(rng);
            let c = rng.random_range(0.5..2.0);
            (
                vec![signed(rng, &s)],
                Box::new(move |t: &mut Tape<f64>, v: &[Var]| t.scalar(v[0], c, op).unwrap()),
            )
        }));
    }
    for (name, op) in [
        ("reduce mean", ReduceOp::Mean),
        ("reduce sum", ReduceOp::Sum),
        ("reduce mean_abs", ReduceOp::MeanAbs),
        ("reduce mean_sq", ReduceOp::MeanSq),
    ] {
        out.push(run_case(name, move |rng| {
            let s = img(rng);
            (
                vec![signed(rng, &s)],
                Box::new(move |t: &mut Tape<f64>, v: &[Var]| t.reduce(v[0], op).unwrap()),
            )
        }));
    }
    out.push(run_case("concat_channels", |rng| {
        let s = img(rng);
        let s2 = [s[0], rng.random_range(1..4), s[2], s[3]];
        (
            vec![uniform(rng, &s, -1.0, 1.0), uniform(rng, &s2, -1.0, 1.0)],
            Box::new(|t: &mut Tape<f64>, v: &[Var]| t.concat_channels(&[v[0], v[1], v[0]]).unwrap()),
        )
    }));
    out.push(run_case("narrow_channels", |rng| {
        let mut s = img(rng);
        s[1] += 2;
        let start = rng.random_range(0..s[1] - 1);
        let len = rng.random_range(1..=s[1] - start);
        (
            vec![uniform(rng, &s, -1.0, 1.0)],
            Box::new(move |t: &mut Tape<f64>, v: &[Var]| t.narrow_channels(v[0], start, len).unwrap()),
        )
    }));
    out.push(run_case("ln_clamped", |rng| {
        let s = img(rng);
        (
            vec![uniform(rng, &s, 0.05, 1.0)],
            Box::new(|t: &mut Tape<f64>, v: &[Var]| t.ln_clamped(v[0], 1e-7).unwrap()),
        )
    }));
    out
}

fn latent(tape: &mut Tape<f64>, z: Var) -> LatentMaps {
    LatentMaps::split(tape, z, LatentSource::FromGDec).unwrap()
}

/// Losses and latent assembly on raw random inputs.
pub fn loss_cases() -> Vec<CaseResult> {
    let mut out = Vec::new();
    out.push(run_case("decomposition_loss", |rng| {
        let s = [rng.random_range(1..3), 3, 5, 4];
        (
            vec![uniform(rng, &s, -1.0, 1.0), uniform(rng, &s, -1.0, 1.0)],
            Box::new(|t: &mut Tape<f64>, v: &[Var]| decomposition_loss(t, v[0], v[1]).unwrap()),
        )
    }));
    for (name, f) in [
        ("cycle_loss_x", cycle_loss_x::<f64> as fn(&mut Tape<f64>, Var, Var) -> _),
        ("cycle_loss_d", cycle_loss_d::<f64>),
    ] {
        out.push(run_case(name, move |rng| {
            let s = [rng.random_range(1..3), 1, 5, 6];
            let a = uniform(rng, &s, 0.0, 1.0);
            let b = signed(rng, &s);
            let b = Tensor::new(s.to_vec(), a.data().iter().zip(b.data()).map(|(x, d)| x + d).collect()).unwrap();
            (
                vec![a, b],
                Box::new(move |t: &mut Tape<f64>, v: &[Var]| f(t, v[0], v[1]).unwrap()),
            )
        }));
    }
    for (name, form) in [
        ("adv d non-saturating", AdversarialForm::NonSaturating),
        ("adv d least-squares", AdversarialForm::LeastSquares),
    ] {
        out.push(run_case(name, move |rng| {
            let s = [rng.random_range(1..3), 1, 3, 3];
            (
                vec![uniform(rng, &s, 0.05, 0.95), uniform(rng, &s, 0.05, 0.95)],
                Box::new(move |t: &mut Tape<f64>, v: &[Var]| adversarial_d_loss(t, v[0], v[1], form).unwrap()),
            )
        }));
    }
    for (name, form) in [
        ("adv g non-saturating", AdversarialForm::NonSaturating),
        ("adv g saturating", AdversarialForm::Saturating),
        ("adv g least-squares", AdversarialForm::LeastSquares),
    ] {
        out.push(run_case(name, move |rng| {
            let s = [rng.random_range(1..3), 1, 3, 3];
            (
                vec![uniform(rng, &s, 0.05, 0.95)],
                Box::new(move |t: &mut Tape<f64>, v: &[Var]| adversarial_g_loss(t, v[0], form).unwrap()),
            )
        }));
    }
    out.push(run_case("mask_loss", |rng| {
        let s = [rng.random_range(1..3), 1, 5, 5];
        let z = uniform(rng, &s, 0.9, 1.0);
        let mask = soft_mask(&z, 0.95).unwrap();
        let x = uniform(rng, &s, 0.0, 1.0);
        let d = signed(rng, &s);
        let recon = Tensor::new(s.to_vec(), x.data().iter().zip(d.data()).map(|(a, b)| a + b).collect()).unwrap();
        (
            vec![recon, x],
            Box::new(move |t: &mut Tape<f64>, v: &[Var]| mask_loss(t, v[0], v[1], &mask).unwrap()),
        )
    }));
    for (name, w) in [
        ("assemble z_process", None),
        ("assemble z_bonefree", Some(ComponentWeights::BONE_SUPPRESS)),
        ("assemble lung-enhance", Some(ComponentWeights::LUNG_ENHANCE)),
    ] {
        out.push(run_case(name, move |rng| {
            let b = rng.random_range(1..3);
            (
                vec![
                    uniform(rng, &[b, 3, 4, 4], -1.0, 1.0),
                    uniform(rng, &[b, 1, 4, 4], 0.0, 1.0),
                ],
                Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
                    let m = latent(t, v[0]);
                    match w {
                        None => assemble_z_process(t, &m, v[1]).unwrap(),
                        Some(w) if w == ComponentWeights::BONE_SUPPRESS => assemble_z_bonefree(t, &m, v[1]).unwrap(),
                        Some(w) => assemble(t, &m, v[1], w).unwrap(),
                    }
                }),
            )
        }));
    }
    out
}

fn smooth_config() -> DecGanConfig {
    let mut c = DecGanConfig::with_width(2);
    c.g_d.activation = Activation::Tanh;
    c.g_x.activation = Activation::Tanh;
    c.g_dec.activation = Activation::Tanh;
    c.d_d.activation = Activation::Tanh;
    c.d_x.activation = Activation::Tanh;
    c.d_dec.activation = Activation::Tanh;
    c
}

fn params_of<N: Network<f64>>(n: &N) -> Vec<Tensor<f64>> {
    n.params().iter().map(|(_, t)| t.clone()).collect()
}

/// Splits trailing tape handles into one [`Bound`] per network.
fn bind_all(v: &[Var], counts: &[usize]) -> Vec<Bound> {
    let mut rest = v;
    counts
        .iter()
        .map(|&n| {
            let (a, b) = rest.split_at(n);
            rest = b;
            Bound::from_vars(a.to_vec())
        })
        .collect()
}

/// Random tiny networks plus data tensors, with the parameters of the chosen
/// networks appended as further inputs.
struct Setup {
    nets: DecGan<f64>,
    inputs: Vec<Tensor<f64>>,
    counts: Vec<usize>,
}

#[derive(Clone, Copy)]
enum Net {
    GD,
    GX,
    GDec,
    DD,
    DX,
    DDec,
}

impl Setup {
    /// Data shapes are `B×C×8×8` for the listed channel counts.
    fn new(rng: &mut Rng, channels: &[usize], nets: &[Net]) -> Self {
        let gan = DecGan::<f64>::new(smooth_config(), rng.random()).unwrap();
        let b = rng.random_range(1..3);
        let mut inputs: Vec<_> = channels
            .iter()
            .map(|&c| uniform(rng, &[b, c, 8, 8], 0.0, 1.0))
            .collect();
        let mut counts = Vec::new();
        for n in nets {
            let p = match n {
                Net::GD => params_of(&gan.g_d),
                Net::GX => params_of(&gan.g_x),
                Net::GDec => params_of(&gan.g_dec),
                Net::DD => params_of(&gan.d_d),
                Net::DX => params_of(&gan.d_x),
                Net::DDec => params_of(&gan.d_dec),
            };
            counts.push(p.len());
            inputs.extend(p);
        }
        Self {
            nets: gan,
            inputs,
            counts,
        }
    }

    fn finish(
        self,
        f: impl Fn(&DecGan<f64>, &mut Tape<f64>, &[Var], &[Bound]) -> Var + 'static,
    ) -> (Vec<Tensor<f64>>, Box<Build>) {
        let data = self.inputs.len() - self.counts.iter().sum::<usize>();
        let (nets, counts) = (self.nets, self.counts);
        (
            self.inputs,
            Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
                let p = bind_all(&v[data..], &counts);
                f(&nets, t, &v[..data], &p)
            }),
        )
    }
}

/// A fixed soft mask; the objective treats it as a constant.
fn ramp_mask(b: usize) -> SoftMask<f64> {
    let ramp = Tensor::new(vec![b, 1, 8, 8], (0..64 * b).map(|i| (i % 7) as f64 / 6.0).collect()).unwrap();
    soft_mask(&ramp, 0.95).unwrap()
}

/// `G_D(x)`, its decomposition and the process stack.
fn decompose(n: &DecGan<f64>, t: &mut Tape<f64>, gd: &Bound, gdec: &Bound, x: Var) -> (Var, LatentMaps) {
    let fake_d = n.g_d.forward(t, gd, x).unwrap();
    let z = n.g_dec.forward(t, gdec, fake_d).unwrap();
    (fake_d, latent(t, z))
}

const FORMS: [(&str, AdversarialForm); 3] = [
    ("non-saturating", AdversarialForm::NonSaturating),
    ("saturating", AdversarialForm::Saturating),
    ("least-squares", AdversarialForm::LeastSquares),
];

/// Every loss composed through small random networks.
pub fn network_cases() -> Vec<CaseResult> {
    let mut out = Vec::new();
    out.push(run_case("L_Dec via G_Dec", |rng| {
        Setup::new(rng, &[1, 3], &[Net::GDec]).finish(|n, t, v, p| {
            let z = n.g_dec.forward(t, &p[0], v[0]).unwrap();
            decomposition_loss(t, z, v[1]).unwrap()
        })
    }));
    out.push(run_case("L_cycX via G_D, G_Dec, G_X", |rng| {
        Setup::new(rng, &[1], &[Net::GD, Net::GDec, Net::GX]).finish(|n, t, v, p| {
            let (fake_d, maps) = decompose(n, t, &p[0], &p[1], v[0]);
            let rec = reconstruct(t, &n.g_x, &p[2], &maps, fake_d, ComponentWeights::IDENTITY).unwrap();
            cycle_loss_x(t, rec, v[0]).unwrap()
        })
    }));
    out.push(run_case("L_cycD via G_X, G_D", |rng| {
        Setup::new(rng, &[3, 1], &[Net::GX, Net::GD]).finish(|n, t, v, p| {
            let fake_x = n.g_x.forward(t, &p[0], v[0]).unwrap();
            let rec = n.g_d.forward(t, &p[1], fake_x).unwrap();
            cycle_loss_d(t, rec, v[1]).unwrap()
        })
    }));
    out.push(run_case("L_mask via G_D, G_Dec, G_X", |rng| {
        Setup::new(rng, &[1], &[Net::GD, Net::GDec, Net::GX]).finish(|n, t, v, p| {
            let (fake_d, maps) = decompose(n, t, &p[0], &p[1], v[0]);
            let bf = reconstruct(t, &n.g_x, &p[2], &maps, fake_d, ComponentWeights::BONE_SUPPRESS).unwrap();
            let m = ramp_mask(t.shape(v[0])[0]);
            mask_loss(t, bf, v[0], &m).unwrap()
        })
    }));
    for (label, form) in FORMS {
        out.push(run_case(&format!("adv D_D {label}"), move |rng| {
            Setup::new(rng, &[1, 1], &[Net::DD, Net::GD]).finish(move |n, t, v, p| {
                let real = n.d_d.forward(t, &p[0], v[0]).unwrap();
                let fake_d = n.g_d.forward(t, &p[1], v[1]).unwrap();
                let fake = n.d_d.forward(t, &p[0], fake_d).unwrap();
                let ld = adversarial_d_loss(t, real, fake, form).unwrap();
                let lg = adversarial_g_loss(t, fake, form).unwrap();
                t.add(ld, lg).unwrap()
            })
        }));
        out.push(run_case(&format!("adv D_X {label}"), move |rng| {
            Setup::new(rng, &[1, 3], &[Net::DX, Net::GX]).finish(move |n, t, v, p| {
                let real = n.d_x.forward(t, &p[0], v[0]).unwrap();
                let fake_x = n.g_x.forward(t, &p[1], v[1]).unwrap();
                let fake = n.d_x.forward(t, &p[0], fake_x).unwrap();
                let ld = adversarial_d_loss(t, real, fake, form).unwrap();
                let lg = adversarial_g_loss(t, fake, form).unwrap();
                t.add(ld, lg).unwrap()
            })
        }));
        out.push(run_case(&format!("adv D_Dec {label}"), move |rng| {
            Setup::new(rng, &[1, 3], &[Net::DDec, Net::GD, Net::GDec]).finish(move |n, t, v, p| {
                let real = n.d_dec.forward(t, &p[0], v[1]).unwrap();
                let (fake_d, maps) = decompose(n, t, &p[1], &p[2], v[0]);
                let zp = assemble_z_process(t, &maps, fake_d).unwrap();
                let fake = n.d_dec.forward(t, &p[0], zp).unwrap();
                let ld = adversarial_d_loss(t, real, fake, form).unwrap();
                let lg = adversarial_g_loss(t, fake, form).unwrap();
                t.add(ld, lg).unwrap()
            })
        }));
    }
    out
}

/// The full per-step generator and discriminator objectives.
pub fn objective_cases() -> Vec<CaseResult> {
    let g = run_case("generator objective", |rng| {
        Setup::new(rng, &[1, 1, 3], &[Net::GD, Net::GX, Net::GDec]).finish(|n, t, v, p| {
            let (x, d, i_dec) = (v[0], v[1], v[2]);
            let z_d = n.g_dec.forward(t, &p[2], d).unwrap();
            let l_dec = decomposition_loss(t, z_d, i_dec).unwrap();
            let (fake_d, maps) = decompose(n, t, &p[0], &p[2], x);
            let x_rec = reconstruct(t, &n.g_x, &p[1], &maps, fake_d, ComponentWeights::IDENTITY).unwrap();
            let zp = assemble_z_process(t, &maps, fake_d).unwrap();
            let cyc_x = cycle_loss_x(t, x_rec, x).unwrap();
            let fake_x = n.g_x.forward(t, &p[1], i_dec).unwrap();
            let d_rec = n.g_d.forward(t, &p[0], fake_x).unwrap();
            let cyc_d = cycle_loss_d(t, d_rec, d).unwrap();
            let x_bf = reconstruct(t, &n.g_x, &p[1], &maps, fake_d, ComponentWeights::BONE_SUPPRESS).unwrap();
            let m = ramp_mask(t.shape(x)[0]);
            let l_mask = mask_loss(t, x_bf, x, &m).unwrap();
            let mut total = l_dec;
            for (net, fake) in [(&n.d_d, fake_d), (&n.d_x, fake_x), (&n.d_dec, zp)] {
                let s = net.forward_frozen(t, fake).unwrap();
                let a = adversarial_g_loss(t, s, AdversarialForm::NonSaturating).unwrap();
                total = t.add(total, a).unwrap();
            }
            let cyc = t.add(cyc_x, cyc_d).unwrap();
            let cyc = t.mul_scalar(cyc, 10.0).unwrap();
            total = t.add(total, cyc).unwrap();
            let lm = t.mul_scalar(l_mask, 5.0).unwrap();
            t.add(total, lm).unwrap()
        })
    });
    let d = run_case("discriminator objective", |rng| {
        Setup::new(rng, &[1, 1, 3, 3, 1, 1], &[Net::DD, Net::DX, Net::DDec]).finish(|n, t, v, p| {
            let mut total = None;
            for (k, net) in [&n.d_d, &n.d_x, &n.d_dec].into_iter().enumerate() {
                let (real, fake) = match k {
                    0 => (v[0], v[4]),
                    1 => (v[1], v[5]),
                    _ => (v[2], v[3]),
                };
                let sr = net.forward(t, &p[k], real).unwrap();
                let sf = net.forward(t, &p[k], fake).unwrap();
                let l = adversarial_d_loss(t, sr, sf, AdversarialForm::NonSaturating).unwrap();
                total = Some(match total {
                    None => l,
                    Some(acc) => t.add(acc, l).unwrap(),
                });
            }
            total.unwrap()
        })
    });
    vec![g, d]
}

/// All cases, in a fixed order.
pub fn suite() -> Vec<CaseResult> {
    let mut out = primitive_cases();
    out.extend(loss_cases());
    out.extend(network_cases());
    out.extend(objective_cases());
    out
}
