#![allow(dead_code)]

use asp_core::tensor::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Naive triple loop, independent of the tape's kernel.
pub fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.data()[i * k + p] * b.data()[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-10)
}

/// Central finite differences of a scalar function of several inputs.
pub fn numeric_gradients<F>(inputs: &[Tensor], f: &F, h: f64) -> Vec<Vec<f64>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars).unwrap();
        tape.value(out).item()
    };
    let mut result = Vec::new();
    for t in 0..inputs.len() {
        let mut g = vec![0.0; inputs[t].numel()];
        for (k, slot) in g.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[t].data_mut()[k] += h;
            let mut minus = inputs.to_vec();
            minus[t].data_mut()[k] -= h;
            *slot = (eval(&plus) - eval(&minus)) / (2.0 * h);
        }
        result.push(g);
    }
    result
}

pub fn analytic_gradients<F>(inputs: &[Tensor], f: &F) -> Vec<Vec<f64>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &vars).unwrap();
    let grads = tape.backward(out).unwrap();
    vars.iter().map(|&v| grads.wrt(v).into_data()).collect()
}

/// Worst relative error between analytic and numeric gradients over all
/// inputs of `f`.
pub fn gradcheck<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(inputs, &f);
    let numeric = numeric_gradients(inputs, &f, 1e-5);
    analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Reduces any tensor to a scalar with fixed random weights so gradient
/// checks see a non-trivial upstream gradient.
pub fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let w = random_tensor(&mut rng(seed), &shape);
    let w = tape.constant(w);
    let p = tape.mul(x, w)?;
    tape.sum(p)
}

pub fn micro_config() -> asp_core::model::ModelConfig {
    asp_core::model::ModelConfig {
        heads: 2,
        d_word: 4,
        d_img: 6,
        d_shared: 5,
        mlp_depth: 2,
        ..Default::default()
    }
}

/// 2 attributes × 2 objects with random tokens and weights.
pub fn micro_params(seed: u64) -> asp_core::model::ModelParams {
    let mut r = rng(seed);
    let attr = random_tensor(&mut r, &[2, 4]);
    let obj = random_tensor(&mut r, &[2, 4]);
    asp_core::model::ModelParams::new(micro_config(), attr, obj, &mut r).unwrap()
}

/// Gradient check of the full loss with respect to every trainable tensor.
pub fn model_gradcheck(params: &asp_core::model::ModelParams, z: &Tensor, attr_t: &[usize], obj_t: &[usize]) -> f64 {
    use asp_core::model::{forward_tape, loss_tape, Mode};
    let inputs: Vec<Tensor> = params.weights.named().into_iter().map(|(_, t)| t.clone()).collect();
    gradcheck(&inputs, |tape, vars| {
        let mut it = vars.iter();
        let w = params.weights.map(|_| *it.next().unwrap());
        let a = tape.constant(params.attr_tokens.clone());
        let o = tape.constant(params.obj_tokens.clone());
        let zv = tape.constant(z.clone());
        let s = forward_tape(tape, &params.config, &w, a, o, zv, &mut Mode::Eval)?;
        loss_tape(tape, &s, attr_t, obj_t)
    })
}

/// Single-head attention with identity value/output maps, written out
/// directly: row i is the softmax(q_i·k_j/√d)-weighted mean of the rows of x.
pub fn attention_identity_oracle(x: &Tensor, wq: &Tensor, wk: &Tensor) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let l = x.rows();
    let d = x.cols();
    let q = naive_matmul(x, wq);
    let k = naive_matmul(x, wk);
    let dh = wq.cols();
    let mut weights = Vec::new();
    let mut out = Vec::new();
    for i in 0..l {
        let s: Vec<f64> = (0..l)
            .map(|j| (0..dh).map(|p| q[i * dh + p] * k[j * dh + p]).sum::<f64>() / (dh as f64).sqrt())
            .collect();
        let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = s.iter().map(|v| (v - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        let a: Vec<f64> = e.iter().map(|v| v / z).collect();
        out.push((0..d).map(|c| (0..l).map(|j| a[j] * x.at(j, c)).sum()).collect());
        weights.push(a);
    }
    (weights, out)
}

/// Runs `multi_head_attention` with one head whose value and output maps
/// are the identity and whose output bias is zero.
pub fn attention_identity_actual(x: &Tensor, wq: &Tensor, wk: &Tensor) -> (Tensor, Tensor) {
    use asp_core::model::{multi_head_attention, Attention, Head, Linear, Norm};
    let d = x.cols();
    let mut tape = Tape::new();
    let att = Attention {
        heads: vec![Head {
            query: tape.constant(wq.clone()),
            key: tape.constant(wk.clone()),
            value: tape.constant(Tensor::identity(d)),
            output: tape.constant(Tensor::identity(d)),
        }],
        out_bias: tape.constant(Tensor::zeros(&[d])),
        norm: Norm {
            gain: tape.constant(Tensor::ones(&[d])),
            bias: tape.constant(Tensor::zeros(&[d])),
        },
        post: Linear {
            weight: tape.constant(Tensor::identity(d)),
            bias: tape.constant(Tensor::zeros(&[d])),
        },
    };
    let xv = tape.constant(x.clone());
    let o = multi_head_attention(&mut tape, &att, xv).unwrap();
    (tape.value(o.weights[0]).clone(), tape.value(o.output).clone())
}

/// Random probability bundle for prediction tests.
pub fn random_bundle(r: &mut impl Rng, b: usize, n: usize, m: usize) -> asp_core::model::ScoreBundle {
    let a = random_tensor(r, &[b, n]);
    let o = random_tensor(r, &[b, m]);
    let scale = r.random_range(0.5..8.0);
    let s = |t: Tensor| Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * scale).collect()).unwrap();
    asp_core::model::ScoreBundle::from_logits(s(a), s(o)).unwrap()
}

/// Exhaustive scan over all compositions, keeping the first maximum.
pub fn brute_force_predict(bundle: &asp_core::model::ScoreBundle, mask: Option<&[bool]>) -> Vec<(usize, usize)> {
    let (n, m) = (bundle.n_attrs(), bundle.n_objs());
    (0..bundle.batch_size())
        .map(|i| {
            let mut best = None;
            let mut best_score = f64::NEG_INFINITY;
            for a in 0..n {
                for o in 0..m {
                    if mask.is_some_and(|mk| !mk[a * m + o]) {
                        continue;
                    }
                    let s = bundle.attr_probs.at(i, a) * bundle.obj_probs.at(i, o);
                    if best.is_none() || s > best_score {
                        best = Some((a, o));
                        best_score = s;
                    }
                }
            }
            best.unwrap()
        })
        .collect()
}

/// Minimal HTTP server answering `/relatedness` queries from a fixed map
/// keyed by (node1 term, node2 term); unknown pairs get 404.
pub struct FakeRelatedness {
    pub base_url: String,
    pub requests: std::sync::Arc<std::sync::atomic::AtomicUsize>,
    pub max_in_flight: std::sync::Arc<std::sync::atomic::AtomicUsize>,
}

impl FakeRelatedness {
    pub fn start(scores: std::collections::HashMap<(String, String), f64>, delay: std::time::Duration) -> Self {
        use std::io::{BufRead, BufReader, Write};
        use std::sync::atomic::{AtomicUsize, Ordering};
        use std::sync::Arc;
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let base_url = format!("http://{}", listener.local_addr().unwrap());
        let requests = Arc::new(AtomicUsize::new(0));
        let max_in_flight = Arc::new(AtomicUsize::new(0));
        let current = Arc::new(AtomicUsize::new(0));
        let scores = Arc::new(scores);
        let (req, mx) = (requests.clone(), max_in_flight.clone());
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { continue };
                let (req, mx, current, scores) = (req.clone(), mx.clone(), current.clone(), scores.clone());
                std::thread::spawn(move || {
                    let now = current.fetch_add(1, Ordering::SeqCst) + 1;
                    mx.fetch_max(now, Ordering::SeqCst);
                    req.fetch_add(1, Ordering::SeqCst);
                    let mut reader = BufReader::new(stream.try_clone().unwrap());
                    let mut first = String::new();
                    reader.read_line(&mut first).unwrap();
                    loop {
                        let mut l = String::new();
                        if reader.read_line(&mut l).unwrap() == 0 || l == "\r\n" {
                            break;
                        }
                    }
                    std::thread::sleep(delay);
                    let target = first.split_whitespace().nth(1).unwrap_or("/").to_string();
                    let url = url::Url::parse(&format!("http://x{target}")).unwrap();
                    let q: std::collections::HashMap<String, String> = url.query_pairs().into_owned().collect();
                    let term = |k: &str| q.get(k).map(|v| v.trim_start_matches("/c/en/").to_string()).unwrap_or_default();
                    let (status, body) = match scores.get(&(term("node1"), term("node2"))) {
                        Some(v) if url.path() == "/relatedness" => ("200 OK", format!("{{\"value\": {v}}}")),
                        _ => ("404 Not Found", "{\"error\": \"unknown\"}".to_string()),
                    };
                    let resp = format!(
                        "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                        body.len()
                    );
                    let _ = stream.write_all(resp.as_bytes());
                    current.fetch_sub(1, Ordering::SeqCst);
                });
            }
        });
        FakeRelatedness {
            base_url,
            requests,
            max_in_flight,
        }
    }

    pub fn requests(&self) -> usize {
        self.requests.load(std::sync::atomic::Ordering::SeqCst)
    }
}

/// Random 5×6-style sweep instance: scores, seen flags (both kinds present),
/// labels and an optional feasibility mask that keeps at least one column.
pub struct SweepCase {
    pub scores: Tensor,
    pub seen: Vec<bool>,
    pub gt: Vec<usize>,
    pub feasible: Option<Vec<bool>>,
}

pub fn random_sweep_case(r: &mut impl Rng, n: usize, c: usize, with_mask: bool) -> SweepCase {
    let scores = Tensor::matrix(n, c, (0..n * c).map(|_| r.random_range(0.0..1.0)).collect()).unwrap();
    let mut seen: Vec<bool> = (0..c).map(|_| r.random_bool(0.5)).collect();
    seen[0] = true;
    seen[c - 1] = false;
    let gt = (0..n).map(|_| r.random_range(0..c)).collect();
    let feasible = with_mask.then(|| {
        let mut f: Vec<bool> = (0..c).map(|_| r.random_bool(0.7)).collect();
        f[r.random_range(0..c)] = true;
        f
    });
    SweepCase {
        scores,
        seen,
        gt,
        feasible,
    }
}

/// Evaluates `count` evenly spaced biases spanning the score range plus a
/// margin, with a plain biased argmax per image.
pub fn dense_sweep(case: &SweepCase, count: usize) -> Vec<(f64, f64, f64)> {
    let d = case.scores.data();
    let lo = d.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let r = hi - lo;
    let margin = 0.01 * r.max(1e-9);
    let (start, end) = (-r - margin, r + margin);
    let n = case.scores.rows();
    let c = case.scores.cols();
    let seen_imgs: Vec<usize> = (0..n).filter(|&i| case.seen[case.gt[i]]).collect();
    let unseen_imgs: Vec<usize> = (0..n).filter(|&i| !case.seen[case.gt[i]]).collect();
    (0..count)
        .map(|k| {
            let b = start + (end - start) * k as f64 / (count - 1) as f64;
            let pred: Vec<usize> = (0..n)
                .map(|i| {
                    let mut best = usize::MAX;
                    let mut best_s = f64::NEG_INFINITY;
                    for j in 0..c {
                        if case.feasible.as_ref().is_some_and(|f| !f[j]) {
                            continue;
                        }
                        let s = case.scores.at(i, j) + if case.seen[j] { b } else { 0.0 };
                        if best == usize::MAX || s > best_s {
                            best = j;
                            best_s = s;
                        }
                    }
                    best
                })
                .collect();
            let acc = |imgs: &[usize]| {
                if imgs.is_empty() {
                    0.0
                } else {
                    imgs.iter().filter(|&&i| pred[i] == case.gt[i]).count() as f64 / imgs.len() as f64
                }
            };
            (b, acc(&seen_imgs), acc(&unseen_imgs))
        })
        .collect()
}

/// (AUC, best HM) of a dense sweep.
pub fn dense_metrics(points: &[(f64, f64, f64)]) -> (f64, f64) {
    let auc = points
        .windows(2)
        .map(|w| (w[1].1 - w[0].1) * (w[0].2 + w[1].2) / 2.0)
        .sum();
    let hm = points
        .iter()
        .map(|&(_, s, u)| if s + u > 0.0 { 2.0 * s * u / (s + u) } else { 0.0 })
        .fold(0.0, f64::max);
    (auc, hm)
}
