//! Central finite-difference verification of every backward rule, the
//! network modules and the end-to-end model, in double precision.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::coords::{Cell, Coord};
use crate::decoder::{AttnNorm, DecoderConfig, QueryGeometry, Summaries, Variant};
use crate::encoder::{self, EncoderConfig};
use crate::image::Image;
use crate::model::{Model, ModelConfig};
use crate::nn::ParamStore;
use crate::tensor::{Border, Graph, OpKind, Result, Tensor, Var};
use crate::train::{batch_loss, l1_loss, SamplePair};

pub const TOLERANCE: f64 = 1e-4;
pub const STEP: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckStats {
    pub name: String,
    pub instances: usize,
    pub checked: usize,
    /// Elements whose perturbation crossed a relu/abs kink.
    pub skipped: usize,
    pub max_rel_err: f64,
}

impl CheckStats {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_err < TOLERANCE
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradcheckReport {
    pub checks: Vec<CheckStats>,
    pub ops: BTreeSet<OpKind>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(CheckStats::passed)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            let _ = writeln!(
                s,
                "{:<24} instances={:<3} checked={:<6} skipped={:<4} max_rel_err={:.3e} {}",
                c.name,
                c.instances,
                c.checked,
                c.skipped,
                c.max_rel_err,
                if c.passed() { "ok" } else { "FAIL" }
            );
        }
        let ops: Vec<&str> = self.ops.iter().map(|k| k.name()).collect();
        let _ = writeln!(s, "op categories exercised: {}", ops.join(", "));
        let _ = writeln!(s, "{}", if self.passed() { "gradcheck passed" } else { "gradcheck FAILED" });
        s
    }
}

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub instances: usize,
    /// Model checked end to end with sampled elements.
    pub model: ModelConfig,
    /// Elements sampled per parameter tensor per instance in that check.
    pub samples_per_tensor: usize,
    /// Corrupt one backward rule (negative control).
    pub fault: Option<OpKind>,
}

impl GradcheckOptions {
    pub fn new(model: ModelConfig, seed: u64) -> Self {
        GradcheckOptions {
            seed,
            instances: 10,
            model,
            samples_per_tensor: 3,
            fault: None,
        }
    }
}

/// Which input elements to perturb.
enum Select {
    All,
    PerInput(usize),
}

struct Harness<'a> {
    fault: Option<OpKind>,
    rng: &'a mut ChaCha8Rng,
    ops: &'a mut BTreeSet<OpKind>,
}

type Build<'b> = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'b;

impl Harness<'_> {
    /// Loss `Σ out ⊙ R` for fixed random `R`, so every output entry matters.
    /// The trailing `named.len()` inputs are registered as named parameters, so
    /// module code that binds them by name picks up the perturbed values.
    fn eval(
        &self,
        inputs: &[Tensor<f64>],
        named: &[String],
        build: &Build<'_>,
        weights: &Option<Tensor<f64>>,
        fault: bool,
    ) -> (Graph<f64>, Vec<Var>, Var, Option<Tensor<f64>>) {
        let mut g = Graph::new();
        if fault {
            if let Some(k) = self.fault {
                g.inject_backward_fault(k);
            }
        }
        let first_named = inputs.len() - named.len();
        let vars: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if i < first_named {
                    g.variable(t.clone())
                } else {
                    g.param(&named[i - first_named], t)
                }
            })
            .collect();
        let out = build(&mut g, &vars).expect("gradcheck graph");
        let w = weights.clone().unwrap_or_else(|| {
            let n = g.value(out).len();
            let mut r = ChaCha8Rng::seed_from_u64(n as u64 ^ 0x5eed);
            Tensor::new(g.shape(out), (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).expect("shape")
        });
        let wv = g.constant(w.clone());
        let p = g.mul(out, wv).expect("same shape");
        let loss = g.sum(p);
        (g, vars, loss, Some(w))
    }

    fn check(&mut self, stats: &mut CheckStats, inputs: Vec<Tensor<f64>>, named: &[String], select: Select, build: &Build<'_>) {
        let (g, vars, loss, weights) = self.eval(&inputs, named, build, &None, true);
        self.ops.extend(g.op_kinds());
        let sig = g.kink_signature();
        let grads = g.backward(loss).expect("backward");
        let analytic: Vec<Tensor<f64>> = vars
            .iter()
            .zip(&inputs)
            .map(|(v, t)| grads.wrt(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        stats.instances += 1;
        for (k, t) in inputs.iter().enumerate() {
            let picks: Vec<usize> = match select {
                Select::All => (0..t.len()).collect(),
                Select::PerInput(n) => index::sample(self.rng, t.len(), n.min(t.len())).into_vec(),
            };
            for i in picks {
                let mut f = [0.0; 2];
                let mut crossed = false;
                for (j, sgn) in [1.0, -1.0].into_iter().enumerate() {
                    let mut p = inputs.clone();
                    p[k].data_mut()[i] += sgn * STEP;
                    let (gp, _, lp, _) = self.eval(&p, named, build, &weights, false);
                    crossed |= gp.kink_signature() != sig;
                    f[j] = gp.value(lp).data()[0];
                }
                if crossed {
                    stats.skipped += 1;
                    continue;
                }
                let numeric = (f[0] - f[1]) / (2.0 * STEP);
                let e = relative_error(analytic[k].data()[i], numeric);
                stats.checked += 1;
                if e > stats.max_rel_err || e.is_nan() {
                    stats.max_rel_err = if e.is_nan() { f64::INFINITY } else { e };
                }
            }
        }
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape")
}

fn stats(name: &str) -> CheckStats {
    CheckStats {
        name: name.to_string(),
        instances: 0,
        checked: 0,
        skipped: 0,
        max_rel_err: 0.0,
    }
}

fn small_model() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            c_enc: 4,
            n_blocks: 1,
            c_out: 8,
            unfold: false,
        },
        decoder: DecoderConfig {
            levels: 3,
            width: 8,
            base: 2,
            blocks: 1,
            heads: 2,
            variant: Variant::Full,
            attn_norm: AttnNorm::SqrtTokens,
            zero_init_final: false,
        },
    }
}

fn random_pair(rng: &mut ChaCha8Rng, side: usize, queries: usize) -> SamplePair {
    let lr = Image::new(side, side, 3, (0..side * side * 3).map(|_| rng.gen::<f64>()).collect()).expect("geometry");
    let coords = (0..queries)
        .map(|_| Coord::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
        .collect();
    let r = rng.gen_range(1.0..4.0);
    SamplePair {
        lr_patch: lr,
        coords,
        targets: (0..3 * queries).map(|_| rng.gen::<f64>()).collect(),
        cell: Cell {
            h: 2.0 / (r * side as f64),
            w: 2.0 / (r * side as f64),
        },
        scale: r,
    }
}

/// Checks model parameters through the full training loss.
fn check_model(h: &mut Harness<'_>, st: &mut CheckStats, mut cfg: ModelConfig, select: impl Fn() -> Select, instances: usize) {
    // a zeroed output layer would hide every other gradient
    cfg.decoder.zero_init_final = false;
    for _ in 0..instances {
        let seed = h.rng.gen();
        let model = Model::<f64>::new(cfg.clone(), seed).expect("valid model");
        let pair = random_pair(h.rng, 4, 8);
        let names: Vec<String> = model.params.iter().map(|(k, _)| k.clone()).collect();
        let inputs: Vec<Tensor<f64>> = model.params.iter().map(|(_, t)| t.clone()).collect();
        let build = |g: &mut Graph<f64>, _: &[Var]| batch_loss(g, &model, std::slice::from_ref(&pair));
        h.check(st, inputs, &names, select(), &build);
    }
}

pub fn run_suite(opts: &GradcheckOptions) -> GradcheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut ops = BTreeSet::new();
    let mut checks = Vec::new();
    let n = opts.instances.max(1);
    {
        let mut h = Harness {
            fault: opts.fault,
            rng: &mut rng,
            ops: &mut ops,
        };
        let mut op = |h: &mut Harness<'_>, name: &str, mk: &dyn Fn(&mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<Build<'static>>)| {
            let mut st = stats(name);
            for _ in 0..n {
                let (inputs, build) = mk(h.rng);
                h.check(&mut st, inputs, &[], Select::All, build.as_ref());
            }
            checks.push(st);
        };

        op(&mut h, "matmul", &|r| {
            let (m, k, p) = (r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..5));
            (vec![rand_tensor(r, &[m, k]), rand_tensor(r, &[k, p])], Box::new(|g, v| g.matmul(v[0], v[1])))
        });
        op(&mut h, "add (broadcast)", &|r| {
            let (m, c) = (r.gen_range(1..4), r.gen_range(1..5));
            (vec![rand_tensor(r, &[m, c]), rand_tensor(r, &[c])], Box::new(|g, v| g.add(v[0], v[1])))
        });
        op(&mut h, "sub", &|r| {
            let s = [r.gen_range(1..4), r.gen_range(1..4)];
            (vec![rand_tensor(r, &s), rand_tensor(r, &s)], Box::new(|g, v| g.sub(v[0], v[1])))
        });
        op(&mut h, "mul", &|r| {
            let (m, c) = (r.gen_range(1..4), r.gen_range(1..4));
            let b = if r.gen() { vec![m, c] } else { vec![c] };
            (vec![rand_tensor(r, &[m, c]), rand_tensor(r, &b)], Box::new(|g, v| g.mul(v[0], v[1])))
        });
        op(&mut h, "scale", &|r| {
            let c: f64 = r.gen_range(-3.0..3.0);
            let n = r.gen_range(1..6);
            (vec![rand_tensor(r, &[n])], Box::new(move |g, v| Ok(g.scale(v[0], c))))
        });
        op(&mut h, "relu", &|r| {
            let n = r.gen_range(2..9);
            (vec![rand_tensor(r, &[n])], Box::new(|g, v| Ok(g.relu(v[0]))))
        });
        op(&mut h, "abs", &|r| {
            let n = r.gen_range(2..9);
            (vec![rand_tensor(r, &[n])], Box::new(|g, v| Ok(g.abs(v[0]))))
        });
        op(&mut h, "concat", &|r| {
            let m = r.gen_range(1..4);
            let parts: Vec<Tensor<f64>> = (0..r.gen_range(1..4))
                .map(|_| {
                    let c = r.gen_range(1..4);
                    rand_tensor(r, &[m, c])
                })
                .collect();
            (parts, Box::new(|g, v| g.concat(v)))
        });
        op(&mut h, "reshape", &|r| {
            let (a, b) = (r.gen_range(1..4), r.gen_range(1..4));
            (vec![rand_tensor(r, &[a, b])], Box::new(move |g, v| g.reshape(v[0], &[b, a])))
        });
        op(&mut h, "transpose", &|r| {
            let s = [r.gen_range(1..5), r.gen_range(1..5)];
            (vec![rand_tensor(r, &s)], Box::new(|g, v| g.transpose(v[0])))
        });
        op(&mut h, "mean", &|r| {
            let s = [r.gen_range(1..4), r.gen_range(1..4)];
            (vec![rand_tensor(r, &s)], Box::new(|g, v| Ok(g.mean(v[0]))))
        });
        op(&mut h, "sum", &|r| {
            let s = [r.gen_range(1..4), r.gen_range(1..4)];
            (vec![rand_tensor(r, &s)], Box::new(|g, v| Ok(g.sum(v[0]))))
        });
        op(&mut h, "layer_norm", &|r| {
            let s = [r.gen_range(1..4), r.gen_range(2..6)];
            (vec![rand_tensor(r, &s)], Box::new(|g, v| g.layer_norm(v[0], 1e-5)))
        });
        op(&mut h, "unfold3x3", &|r| {
            let s = [r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..3)];
            let border = if r.gen() { Border::Zero } else { Border::Clamp };
            (vec![rand_tensor(r, &s)], Box::new(move |g, v| g.unfold3x3(v[0], border)))
        });
        op(&mut h, "conv2d", &|r| {
            let (hh, ww, ci, co) = (r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..3), r.gen_range(1..3));
            (
                vec![rand_tensor(r, &[hh, ww, ci]), rand_tensor(r, &[3, 3, ci, co]), rand_tensor(r, &[co])],
                Box::new(|g, v| g.conv2d(v[0], v[1], v[2])),
            )
        });
        op(&mut h, "gather_rows", &|r| {
            let (rows, c) = (r.gen_range(1..5), r.gen_range(1..4));
            // repeated indices exercise scatter-accumulation
            let idx: Vec<usize> = (0..r.gen_range(1..7)).map(|_| r.gen_range(0..rows)).collect();
            (vec![rand_tensor(r, &[rows, c])], Box::new(move |g, v| g.gather_rows(v[0], &idx)))
        });
        op(&mut h, "linear_attention", &|r| {
            let heads = r.gen_range(1..3);
            let (t, c) = (r.gen_range(1..6), heads * r.gen_range(1..4));
            let scale = 1.0 / (t as f64).sqrt();
            (
                vec![rand_tensor(r, &[t, c]), rand_tensor(r, &[t, c]), rand_tensor(r, &[t, c])],
                Box::new(move |g, v| g.linear_attention(v[0], v[1], v[2], heads, scale, None)),
            )
        });
        op(&mut h, "linear_attention (ext)", &|r| {
            let heads = r.gen_range(1..3);
            let d = r.gen_range(1..4);
            let t = r.gen_range(1..6);
            let s: Vec<f64> = (0..heads * d * d).map(|_| r.gen_range(-1.0..1.0)).collect();
            (
                vec![rand_tensor(r, &[t, heads * d])],
                Box::new(move |g, v| g.linear_attention(v[0], v[0], v[0], heads, 1.0, Some(&s))),
            )
        });
        op(&mut h, "l1_loss", &|r| {
            let s = [r.gen_range(1..5), 3];
            (vec![rand_tensor(r, &s), rand_tensor(r, &s)], Box::new(|g, v| l1_loss(g, v[0], v[1])))
        });

        // modules, every parameter element
        let small = small_model();
        let mut st = stats("encoder");
        for _ in 0..n {
            let cfg = small.encoder.clone();
            let store = ParamStore::<f64>::init(&cfg.param_specs(), h.rng);
            let img = rand_tensor(h.rng, &[4, 4, 3]);
            let names: Vec<String> = store.iter().map(|(k, _)| k.clone()).collect();
            let inputs: Vec<Tensor<f64>> = store.iter().map(|(_, t)| t.clone()).collect();
            let build = move |g: &mut Graph<f64>, _: &[Var]| -> Result<Var> {
                let x = g.constant(img.clone());
                encoder::encode(g, &store, &cfg, x)
            };
            h.check(&mut st, inputs, &names, Select::All, &build);
        }
        checks.push(st);

        for variant in [Variant::Full, Variant::NoAttention, Variant::Liif] {
            let mut st = stats(&format!("decoder ({variant})"));
            for _ in 0..n {
                let mut dc = small.decoder.clone();
                dc.variant = variant;
                let dec = crate::decoder::Decoder::new(dc, 5).expect("valid");
                let store = ParamStore::<f64>::init(&dec.param_specs(), h.rng);
                let coords: Vec<Coord> = (0..8)
                    .map(|_| Coord::new(h.rng.gen_range(-1.0..1.0), h.rng.gen_range(-1.0..1.0)))
                    .collect();
                let geo = QueryGeometry::new(&coords, Cell { h: 0.2, w: 0.3 }, 4, 4, dec.cfg.levels, dec.cfg.base);
                let mut inputs: Vec<Tensor<f64>> = vec![rand_tensor(h.rng, &[16, 5])];
                inputs.extend(store.iter().map(|(_, t)| t.clone()));
                let names: Vec<String> = store.iter().map(|(k, _)| k.clone()).collect();
                let build = move |g: &mut Graph<f64>, vars: &[Var]| dec.decode(g, &store, vars[0], &geo, Summaries::InCall);
                h.check(&mut st, inputs, &names, Select::All, &build);
            }
            checks.push(st);
        }

        let mut st = stats("end-to-end (small)");
        check_model(&mut h, &mut st, small, || Select::All, n);
        checks.push(st);

        let mut st = stats("end-to-end (model)");
        let per = opts.samples_per_tensor;
        check_model(&mut h, &mut st, opts.model.clone(), || Select::PerInput(per), n);
        checks.push(st);
    }
    GradcheckReport { checks, ops }
}
