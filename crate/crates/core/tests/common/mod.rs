//! Oracles and harnesses shared by the integration tests and the acceptance
//! runner.
#![allow(dead_code)]

use gazecon::encoder::{se_gate_on_graph, EncoderConfig, EncoderParams, Mode};
use gazecon::ingest::{preprocess, synthesize_corpus, VelocitySignal};
use gazecon::numcore::{BatchNormMode, ExecMode, Graph, Tensor, Var};
use gazecon::objective::{halves_pairing, nt_xent_on_graph};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type TestRng = ChaCha8Rng;

pub fn rng(seed: u64) -> TestRng {
    TestRng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut TestRng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn corpus(viewers: usize, per_viewer: usize, seconds: f64, seed: u64) -> Vec<VelocitySignal> {
    synthesize_corpus(viewers, per_viewer, seconds, seed)
        .unwrap()
        .iter()
        .map(|r| preprocess(r).unwrap())
        .collect()
}

/// Double-loop NT-Xent straight from the definition, in f64.
pub fn naive_nt_xent(z: &[Vec<f64>], pair_of: &[usize], tau: f64) -> f64 {
    let n = z.len();
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let mut total = 0.0;
    for i in 0..n {
        let mut denom = 0.0;
        for k in 0..n {
            if k != i {
                denom += (cos(&z[i], &z[k]) / tau).exp();
            }
        }
        let num = (cos(&z[i], &z[pair_of[i]]) / tau).exp();
        total += -(num / denom).ln();
    }
    total / n as f64
}

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Gradients smaller than this are compared in absolute terms.
pub const GRAD_FLOOR: f64 = 1e-4;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GRAD_FLOOR)
}

#[derive(Debug, Clone, Default)]
pub struct GradReport {
    pub name: &'static str,
    pub trials: usize,
    pub checked: usize,
    /// Coordinates skipped because the step straddles a ReLU kink (the two
    /// difference quotients disagree).
    pub kinks: usize,
    pub max_rel_err: f64,
}

impl GradReport {
    pub fn merge(&mut self, other: GradReport) {
        self.trials += other.trials;
        self.checked += other.checked;
        self.kinks += other.kinks;
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
    }
}

/// Compares reverse-mode gradients of the scalar built by `f` with central
/// differences at up to `coords` random positions per input.
pub fn check_gradients<F>(name: &'static str, inputs: Vec<Tensor<f64>>, coords: usize, rng: &mut TestRng, f: F) -> GradReport
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let run = |ins: &[Tensor<f64>], grad: bool| -> (f64, Vec<Tensor<f64>>) {
        let mut g = Graph::new(ExecMode::Sequential);
        let vars: Vec<Var> = ins.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars);
        let value = g.value(out).data()[0];
        if !grad {
            return (value, Vec::new());
        }
        g.backward(out).unwrap();
        (value, vars.iter().map(|v| g.grad(*v)).collect())
    };
    let (_, grads) = run(&inputs, true);
    let mut report = GradReport {
        name,
        trials: 1,
        ..Default::default()
    };
    for (i, t) in inputs.iter().enumerate() {
        let picks: Vec<usize> = if t.len() <= coords {
            (0..t.len()).collect()
        } else {
            (0..coords).map(|_| rng.random_range(0..t.len())).collect()
        };
        for j in picks {
            let quotient = |h: f64| {
                let mut plus = inputs.clone();
                plus[i].data_mut()[j] += h;
                let mut minus = inputs.clone();
                minus[i].data_mut()[j] -= h;
                (run(&plus, false).0 - run(&minus, false).0) / (2.0 * h)
            };
            let coarse = quotient(FD_STEP);
            let fine = quotient(FD_STEP / 2.0);
            if rel_err(coarse, fine) > GRAD_TOLERANCE {
                report.kinks += 1;
                continue;
            }
            report.checked += 1;
            report.max_rel_err = report.max_rel_err.max(rel_err(grads[i].data()[j], coarse));
        }
    }
    report
}

/// Tiny encoder used by the composite check.
pub fn tiny_encoder_config() -> EncoderConfig {
    EncoderConfig::uniform(4)
}

/// Tiny encoder for short training runs; the wider head keeps every
/// projection row away from zero.
pub fn small_train_encoder() -> EncoderConfig {
    EncoderConfig {
        proj_hidden: 16,
        d_z: 8,
        ..EncoderConfig::uniform(4)
    }
}

/// Runs `trials` randomized checks of every differentiable building block
/// and of the full encoder + projection + NT-Xent composite.
pub fn gradient_suite(trials: usize, seed: u64) -> Vec<GradReport> {
    let mut rng = rng(seed);
    let mut reports = Vec::new();
    let mut run_op = |name: &'static str, rng: &mut TestRng, make: &mut dyn FnMut(&mut TestRng) -> GradReport| {
        let mut total = GradReport {
            name,
            ..Default::default()
        };
        for _ in 0..trials {
            total.merge(make(rng));
        }
        reports.push(total);
    };

    run_op("conv1d_same", &mut rng, &mut |rng| {
        let (b, cin, cout, t, k) = (2, 3, 4, 11, [1, 3, 5][rng.random_range(0..3)]);
        let dilation = rng.random_range(1..4);
        let weights = random_tensor(rng, &[b * cout * t], 1.0);
        let inputs = vec![
            random_tensor(rng, &[b, cin, t], 1.0),
            random_tensor(rng, &[cout, cin, k], 1.0),
            random_tensor(rng, &[cout], 1.0),
        ];
        check_gradients("conv1d_same", inputs, 12, rng, |g, v| {
            let y = g.conv1d_same(v[0], v[1], v[2], dilation).unwrap();
            let r = g.constant(weights.clone().reshape(vec![b, cout, t]).unwrap());
            let p = g.mul(y, r).unwrap();
            g.sum(p)
        })
    });

    run_op("batchnorm1d", &mut rng, &mut |rng| {
        let (b, c, t) = (3, 4, 7);
        let eval = rng.random_bool(0.3);
        let mean: Vec<f64> = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
        let var: Vec<f64> = (0..c).map(|_| rng.random_range(0.5..2.0)).collect();
        let weights = random_tensor(rng, &[b, c, t], 1.0);
        let inputs = vec![
            random_tensor(rng, &[b, c, t], 2.0),
            random_tensor(rng, &[c], 1.5),
            random_tensor(rng, &[c], 1.0),
        ];
        check_gradients("batchnorm1d", inputs, 12, rng, |g, v| {
            let mode = if eval {
                BatchNormMode::Eval {
                    running_mean: &mean,
                    running_var: &var,
                }
            } else {
                BatchNormMode::Train
            };
            let (y, _) = g.batchnorm1d(v[0], v[1], v[2], mode).unwrap();
            let r = g.constant(weights.clone());
            let p = g.mul(y, r).unwrap();
            g.sum(p)
        })
    });

    run_op("se_gate", &mut rng, &mut |rng| {
        let (b, c, r, t) = (2, 8, 2, 9);
        let weights = random_tensor(rng, &[b, c, t], 1.0);
        let inputs = vec![
            random_tensor(rng, &[b, c, t], 1.0),
            random_tensor(rng, &[r, c], 1.0),
            random_tensor(rng, &[c, r], 1.0),
        ];
        check_gradients("se_gate", inputs, 12, rng, |g, v| {
            let y = se_gate_on_graph(g, v[0], v[1], v[2]).unwrap();
            let w = g.constant(weights.clone());
            let p = g.mul(y, w).unwrap();
            g.sum(p)
        })
    });

    run_op("project", &mut rng, &mut |rng| {
        let cfg = EncoderConfig {
            proj_hidden: 7,
            d_z: 3,
            ..EncoderConfig::uniform(6)
        };
        let params = EncoderParams::<f64>::init(&cfg, rng.random()).unwrap();
        let head = &params.layers.head;
        let weights = random_tensor(rng, &[5, 3], 1.0);
        let inputs = vec![
            random_tensor(rng, &[5, 6], 1.0),
            head.hidden.weight.clone(),
            head.hidden.bias.clone(),
            head.output.weight.clone(),
            head.output.bias.clone(),
        ];
        check_gradients("project", inputs, 12, rng, |g, v| {
            let mut vars = params.bind_frozen(g);
            vars.head.hidden.weight = v[1];
            vars.head.hidden.bias = v[2];
            vars.head.output.weight = v[3];
            vars.head.output.bias = v[4];
            let z = params.project_on_graph(g, &vars, v[0]).unwrap();
            let w = g.constant(weights.clone());
            let p = g.mul(z, w).unwrap();
            g.sum(p)
        })
    });

    run_op("global_avg_pool", &mut rng, &mut |rng| {
        let weights = random_tensor(rng, &[3, 4], 1.0);
        let inputs = vec![random_tensor(rng, &[3, 4, 10], 1.0)];
        check_gradients("global_avg_pool", inputs, 20, rng, |g, v| {
            let y = g.global_avg_pool(v[0]).unwrap();
            let w = g.constant(weights.clone());
            let p = g.mul(y, w).unwrap();
            g.sum(p)
        })
    });

    run_op("encoder+nt_xent", &mut rng, &mut |rng| {
        let cfg = tiny_encoder_config();
        let params = EncoderParams::<f64>::init(&cfg, rng.random()).unwrap();
        let (pairs, t) = (4, 32);
        let mut inputs = vec![random_tensor(rng, &[2 * pairs, 2, t], 1.0)];
        inputs.extend(params.layers.named().into_iter().map(|(_, p)| p.clone()));
        let pairing = halves_pairing(2 * pairs);
        check_gradients("encoder+nt_xent", inputs, 4, rng, |g, v| {
            let mut rest = v[1..].iter();
            let vars = params.layers.map(|_| *rest.next().unwrap());
            let (h, _) = params.forward(g, &vars, v[0], Mode::Train).unwrap();
            let z = params.project_on_graph(g, &vars, h).unwrap();
            nt_xent_on_graph(g, z, &pairing, 0.3).unwrap().0
        })
    });

    reports
}
