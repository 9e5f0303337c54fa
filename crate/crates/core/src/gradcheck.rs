//! Finite-difference verification of every differentiable building block.
//!
//! Each check draws random inputs, reduces the output to a scalar with a
//! fixed random weighting, and compares the tape's gradient against central
//! differences of the same forward computation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::autodiff::{
    cosine_similarity, finite_difference_gradient, max_relative_error, Tape, Tensor, Var,
    DEFAULT_STEP,
};
use crate::data::{TextInput, TextMode};
use crate::error::{Error, Result};
use crate::losses::{
    arccos_loss, mae_loss, pair_label, suparc_loss, supervised_ntxent, total_loss,
    triplet_modalities_loss, PairMatrix,
};
use crate::model::{
    encode_recurrent, encode_text, masked_fuse, predict, Encoded, EncoderConfig, FusionModel,
    ModalityMask, Params,
};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Gradient coordinates smaller than this are compared absolutely.
pub const GRADCHECK_FLOOR: f64 = 1e-3;

/// Keeps sampled inputs this far from kinks and clamp boundaries.
const KINK_GAP: f64 = 1e-3;

const MAX_RESAMPLES: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub trials: usize,
    pub worst_rel_err: f64,
    pub passed: bool,
}

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

struct Case {
    inputs: Vec<Tensor>,
    build: Build,
}

fn case(inputs: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> Case {
    Case {
        inputs,
        build: Box::new(build),
    }
}

type Sampler = fn(&mut ChaCha8Rng) -> Option<Case>;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.sample(StandardNormal)).collect(),
    )
    .expect("sized")
}

/// Standard normal draws pushed at least 0.1 away from zero.
fn randn_off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    randn(rng, shape).map(|x| x + 0.1 * x.signum())
}

fn randn_positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    randn(rng, shape).map(|x| x.abs() + 0.1)
}

fn weighted_objective(
    tape: &mut Tape,
    case: &Case,
    vars: &[Var],
    weights: Option<&Tensor>,
) -> Result<Var> {
    let out = (case.build)(tape, vars)?;
    match weights {
        None => Ok(out),
        Some(w) => {
            let w = tape.constant(w.clone());
            let prod = tape.mul(out, w)?;
            Ok(tape.sum(prod))
        }
    }
}

/// Worst relative error over all inputs of one case.
fn run_case(case: &Case, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut probe = Tape::new();
    let vars: Vec<Var> = case
        .inputs
        .iter()
        .map(|t| probe.constant(t.clone()))
        .collect();
    let out = (case.build)(&mut probe, &vars)?;
    let out_shape = probe.value(out).shape().to_vec();
    let weights = (!probe.value(out).is_scalar()).then(|| randn(rng, &out_shape));

    let mut tape = Tape::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = weighted_objective(&mut tape, case, &vars, weights.as_ref())?;
    tape.backward(loss)?;

    let mut worst: f64 = 0.0;
    for (k, var) in vars.iter().enumerate() {
        let analytic = tape.grad_tensor(*var);
        if !analytic.is_finite() {
            return Ok(f64::INFINITY);
        }
        let f = |x: &Tensor| {
            let mut t = Tape::new();
            let vs: Vec<Var> = case
                .inputs
                .iter()
                .enumerate()
                .map(|(j, v)| t.constant(if j == k { x.clone() } else { v.clone() }))
                .collect();
            match weighted_objective(&mut t, case, &vs, weights.as_ref()) {
                Ok(v) => t.value(v).item(),
                Err(_) => f64::NAN,
            }
        };
        let numeric = finite_difference_gradient(f, &case.inputs[k], DEFAULT_STEP);
        if numeric.iter().any(|v| !v.is_finite()) {
            return Ok(f64::INFINITY);
        }
        worst = worst.max(max_relative_error(
            analytic.data(),
            &numeric,
            GRADCHECK_FLOOR,
        ));
    }
    Ok(worst)
}

fn run_check(
    name: &'static str,
    sampler: Sampler,
    trials: usize,
    rng: &mut ChaCha8Rng,
) -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let mut drawn = None;
        for _ in 0..MAX_RESAMPLES {
            if let Some(c) = sampler(rng) {
                drawn = Some(c);
                break;
            }
        }
        let c = drawn
            .ok_or_else(|| Error::GradCheck(format!("{name}: could not sample a smooth input")))?;
        let err = run_case(&c, rng)?;
        worst = if err.is_nan() {
            f64::INFINITY
        } else {
            worst.max(err)
        };
    }
    Ok(CheckResult {
        name,
        trials,
        worst_rel_err: worst,
        passed: worst <= GRADCHECK_TOLERANCE,
    })
}

// ----- elementary operations -----

fn unary(input: Tensor, f: fn(&mut Tape, Var) -> Var) -> Option<Case> {
    Some(case(vec![input], move |t, v| Ok(f(t, v[0]))))
}

fn op_samplers() -> Vec<(&'static str, Sampler)> {
    vec![
        ("matmul", |r| {
            let (a, b) = (randn(r, &[3, 4]), randn(r, &[4, 2]));
            Some(case(vec![a, b], |t, v| t.matmul(v[0], v[1])))
        }),
        ("add_row", |r| {
            let (a, b) = (randn(r, &[3, 4]), randn(r, &[4]));
            Some(case(vec![a, b], |t, v| t.add_row(v[0], v[1])))
        }),
        ("add", |r| {
            let (a, b) = (randn(r, &[3, 2]), randn(r, &[3, 2]));
            Some(case(vec![a, b], |t, v| t.add(v[0], v[1])))
        }),
        ("add_broadcast", |r| {
            let (a, b) = (randn(r, &[3, 2]), randn(r, &[]));
            Some(case(vec![a, b], |t, v| t.add(v[0], v[1])))
        }),
        ("sub", |r| {
            let (a, b) = (randn(r, &[3, 2]), randn(r, &[3, 2]));
            Some(case(vec![a, b], |t, v| t.sub(v[0], v[1])))
        }),
        ("mul", |r| {
            let (a, b) = (randn(r, &[3, 2]), randn(r, &[3, 2]));
            Some(case(vec![a, b], |t, v| t.mul(v[0], v[1])))
        }),
        ("mul_broadcast", |r| {
            let (a, b) = (randn(r, &[]), randn(r, &[2, 3]));
            Some(case(vec![a, b], |t, v| t.mul(v[0], v[1])))
        }),
        ("neg", |r| {
            let x = randn(r, &[2, 3]);
            unary(x, Tape::neg)
        }),
        ("tanh", |r| {
            let x = randn(r, &[2, 3]);
            unary(x, Tape::tanh)
        }),
        ("sigmoid", |r| {
            let x = randn(r, &[2, 3]);
            unary(x, Tape::sigmoid)
        }),
        ("relu", |r| {
            let x = randn_off_zero(r, &[2, 3]);
            unary(x, Tape::relu)
        }),
        ("exp", |r| {
            let x = randn(r, &[2, 3]);
            unary(x, Tape::exp)
        }),
        ("log", |r| {
            let x = randn_positive(r, &[2, 3]);
            unary(x, Tape::log)
        }),
        ("sqrt", |r| {
            let x = randn_positive(r, &[2, 3]);
            unary(x, Tape::sqrt)
        }),
        ("abs", |r| {
            let x = randn_off_zero(r, &[2, 3]);
            unary(x, Tape::abs)
        }),
        ("cos", |r| {
            let x = randn(r, &[2, 3]);
            unary(x, Tape::cos)
        }),
        ("arccos", |r| {
            let x = randn(r, &[2, 3]).map(|v| 0.95 * v.tanh());
            unary(x, Tape::arccos)
        }),
        ("scale", |r| {
            let c: f64 = r.sample(StandardNormal);
            let x = randn(r, &[2, 3]);
            Some(case(vec![x], move |t, v| Ok(t.scale(v[0], c))))
        }),
        ("add_scalar", |r| {
            let c: f64 = r.sample(StandardNormal);
            let x = randn(r, &[2, 3]);
            Some(case(vec![x], move |t, v| Ok(t.add_scalar(v[0], c))))
        }),
        ("clamp", |r| {
            let x = randn(r, &[2, 3]);
            if x.data().iter().any(|v| (v.abs() - 0.5).abs() < KINK_GAP) {
                return None;
            }
            Some(case(vec![x], |t, v| Ok(t.clamp(v[0], -0.5, 0.5))))
        }),
        ("sum", |r| {
            let x = randn(r, &[2, 3]);
            unary(x, Tape::sum)
        }),
        ("mean", |r| {
            let x = randn(r, &[2, 3]);
            unary(x, Tape::mean)
        }),
        ("row_sums", |r| {
            let x = randn(r, &[3, 4]);
            Some(case(vec![x], |t, v| t.row_sums(v[0])))
        }),
        ("concat_cols", |r| {
            let (a, b, c) = (randn(r, &[3, 1]), randn(r, &[3, 2]), randn(r, &[3, 3]));
            Some(case(vec![a, b, c], |t, v| t.concat_cols(v)))
        }),
        ("slice_cols", |r| {
            let x = randn(r, &[3, 5]);
            Some(case(vec![x], |t, v| t.slice_cols(v[0], 1, 4)))
        }),
        ("cosine_similarity", |r| {
            let (a, b) = (randn(r, &[5]), randn(r, &[5]));
            Some(case(vec![a, b], |t, v| t.cosine_similarity(v[0], v[1])))
        }),
        ("pairwise_cosine", |r| {
            let h = randn(r, &[4, 3]);
            Some(case(vec![h], |t, v| t.pairwise_cosine(v[0])))
        }),
        ("rowwise_cosine", |r| {
            let (a, b) = (randn(r, &[4, 3]), randn(r, &[4, 3]));
            Some(case(vec![a, b], |t, v| t.rowwise_cosine(v[0], v[1])))
        }),
    ]
}

// ----- losses -----

const LOSS_BATCH: usize = 6;
const LOSS_DIM: usize = 4;
const TAU: f64 = 0.1;
const MARGIN: f64 = 0.15;
const THRESHOLD: f64 = 0.5;

/// Labels clustered around three centers so most batches contain positives.
fn clustered_labels(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let center = [-2.0, 0.0, 2.0][rng.random_range(0..3)];
            center + rng.random_range(-0.2..0.2)
        })
        .collect()
}

/// Row cosines, or `None` if some pair is nearly (anti)parallel.
fn well_spread(h: &Tensor) -> Option<Vec<f64>> {
    let n = h.rows();
    let mut cos = vec![1.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let c = cosine_similarity(h.row(i), h.row(j)).ok()?;
                if c.abs() > 0.99 {
                    return None;
                }
                cos[i * n + j] = c;
            }
        }
    }
    Some(cos)
}

fn contrastive_batch(rng: &mut ChaCha8Rng) -> Option<(Tensor, PairMatrix, Vec<f64>)> {
    let h = randn(rng, &[LOSS_BATCH, LOSS_DIM]);
    let cos = well_spread(&h)?;
    let y = clustered_labels(rng, LOSS_BATCH);
    let pairs = pair_label(&y, THRESHOLD).ok()?;
    (pairs.positive_pairs() > 0).then_some((h, pairs, cos))
}

fn loss_samplers() -> Vec<(&'static str, Sampler)> {
    vec![
        ("mae_loss", |r| {
            let pred = randn(r, &[LOSS_BATCH, 1]);
            let y = clustered_labels(r, LOSS_BATCH);
            if pred
                .data()
                .iter()
                .zip(&y)
                .any(|(p, t)| (p - t).abs() < KINK_GAP)
            {
                return None;
            }
            Some(case(vec![pred], move |t, v| mae_loss(t, v[0], &y)))
        }),
        ("supervised_ntxent", |r| {
            let (h, pairs, _) = contrastive_batch(r)?;
            Some(case(vec![h], move |t, v| {
                supervised_ntxent(t, v[0], &pairs, TAU)
            }))
        }),
        ("arccos_loss", |r| {
            let (h, pairs, _) = contrastive_batch(r)?;
            Some(case(vec![h], move |t, v| {
                arccos_loss(t, v[0], &pairs, TAU, MARGIN)
            }))
        }),
        ("suparc_loss", |r| {
            let (h, pairs, cos) = contrastive_batch(r)?;
            let n = pairs.len();
            for i in 0..n {
                for j in 0..n {
                    let shifted = cos[i * n + j].acos() - MARGIN * pairs.delta(i, j);
                    if i != j
                        && (shifted.abs() < KINK_GAP
                            || (shifted - std::f64::consts::PI).abs() < KINK_GAP)
                    {
                        return None;
                    }
                }
            }
            Some(case(vec![h], move |t, v| {
                suparc_loss(t, v[0], &pairs, TAU, MARGIN)
            }))
        }),
        ("triplet_modalities_loss", |r| {
            const M_TRI: f64 = 0.2;
            let shape = [LOSS_BATCH, LOSS_DIM];
            let inputs: Vec<Tensor> = (0..7).map(|_| randn(r, &shape)).collect();
            let sim =
                |k: usize, i: usize| cosine_similarity(inputs[0].row(i), inputs[k].row(i)).ok();
            for i in 0..LOSS_BATCH {
                for (d, (x, y)) in [(0, 1), (0, 2), (1, 2)].into_iter().enumerate() {
                    for s in [x, y] {
                        let gap = sim(4 + d, i)? - sim(1 + s, i)? + M_TRI;
                        if gap.abs() < KINK_GAP {
                            return None;
                        }
                    }
                }
            }
            Some(case(inputs, |t, v| {
                triplet_modalities_loss(t, v[0], &[v[1], v[2], v[3]], &[v[4], v[5], v[6]], M_TRI)
            }))
        }),
        ("total_loss", |r| {
            let parts: Vec<Tensor> = (0..3).map(|_| randn(r, &[])).collect();
            let (alpha, beta) = (r.random_range(0.0..1.0), r.random_range(0.0..1.0));
            Some(case(parts, move |t, v| {
                total_loss(t, v[0], Some(v[1]), Some(v[2]), alpha, beta)
            }))
        }),
    ]
}

// ----- model components -----

const MODEL_BATCH: usize = 3;

fn small_config() -> EncoderConfig {
    EncoderConfig {
        text_mode: TextMode::Tokens,
        text_vocab: 7,
        text_embed_dim: 3,
        visual_in: 2,
        audio_in: 3,
        hidden: 2,
        rep_dim: 3,
    }
}

/// Parameters drawn at a random seed, with biases perturbed off zero.
fn random_params(rng: &mut ChaCha8Rng) -> Params<Tensor> {
    let seed = rng.random();
    let mut params = FusionModel::init(&small_config(), seed)
        .expect("valid config")
        .params;
    params.for_each_mut(|name, t| {
        if name.ends_with("bias") {
            for v in t.data_mut() {
                *v += 0.3 * rng.sample::<f64, _>(StandardNormal);
            }
        }
    });
    params
}

fn flatten(params: &Params<Tensor>) -> Vec<Tensor> {
    let mut out = Vec::new();
    params.for_each(|_, t| out.push(t.clone()));
    out
}

fn rebind(template: &Params<Tensor>, vars: &[Var]) -> Params<Var> {
    let mut k = 0;
    template.map(|_, _| {
        k += 1;
        vars[k - 1]
    })
}

fn random_sequences(rng: &mut ChaCha8Rng, width: usize) -> Vec<Tensor> {
    (0..MODEL_BATCH)
        .map(|_| {
            let len = rng.random_range(1..=4);
            randn(rng, &[len, width])
        })
        .collect()
}

fn random_tokens(rng: &mut ChaCha8Rng, vocab: usize) -> Vec<TextInput> {
    (0..MODEL_BATCH)
        .map(|_| {
            let len = rng.random_range(1..=5);
            TextInput::Tokens((0..len).map(|_| rng.random_range(0..vocab)).collect())
        })
        .collect()
}

fn model_samplers() -> Vec<(&'static str, Sampler)> {
    vec![
        ("encode_text", |r| {
            let params = random_params(r);
            let texts = random_tokens(r, small_config().text_vocab);
            Some(case(flatten(&params), move |t, v| {
                let bound = rebind(&params, v);
                let refs: Vec<&TextInput> = texts.iter().collect();
                encode_text(t, &bound, &small_config(), &refs)
            }))
        }),
        ("encode_recurrent", |r| {
            let params = random_params(r);
            let seqs = random_sequences(r, small_config().visual_in);
            Some(case(flatten(&params), move |t, v| {
                let bound = rebind(&params, v);
                let refs: Vec<&Tensor> = seqs.iter().collect();
                let cfg = small_config();
                encode_recurrent(t, &bound.visual, &cfg, cfg.visual_in, &refs)
            }))
        }),
        ("fuse", |r| fusion_case(r, ModalityMask::NONE)),
        ("masked_fuse", |r| {
            let masks = [ModalityMask::singles(), ModalityMask::doubles()].concat();
            let mask = masks[r.random_range(0..masks.len())];
            fusion_case(r, mask)
        }),
        ("predict", |r| {
            let params = random_params(r);
            let fused = randn(r, &[MODEL_BATCH, small_config().rep_dim]);
            let mut inputs = vec![fused];
            inputs.extend(flatten(&params));
            Some(case(inputs, move |t, v| {
                let bound = rebind(&params, &v[1..]);
                predict(t, &bound, v[0])
            }))
        }),
    ]
}

/// Fusion with the three modality representations as inputs alongside all parameters.
fn fusion_case(rng: &mut ChaCha8Rng, mask: ModalityMask) -> Option<Case> {
    let params = random_params(rng);
    let rep = small_config().rep_dim;
    let mut inputs: Vec<Tensor> = (0..3).map(|_| randn(rng, &[MODEL_BATCH, rep])).collect();
    inputs.extend(flatten(&params));
    Some(case(inputs, move |t, v| {
        let bound = rebind(&params, &v[3..]);
        let enc = Encoded {
            text: v[0],
            visual: v[1],
            audio: v[2],
        };
        masked_fuse(t, &bound, &enc, mask)
    }))
}

/// Runs every check for `trials` random cases each.
pub fn run_gradcheck(trials: usize, seed: u64) -> Result<Vec<CheckResult>> {
    if trials == 0 {
        return Err(Error::Config("gradcheck needs at least one trial".into()));
    }
    let all = [op_samplers(), loss_samplers(), model_samplers()].concat();
    let mut results = Vec::with_capacity(all.len());
    for (stream, (name, sampler)) in all.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream as u64);
        results.push(run_check(name, sampler, trials, &mut rng)?);
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes() {
        let results = run_gradcheck(3, 7).unwrap();
        for r in &results {
            assert!(r.passed, "{} worst error {}", r.name, r.worst_rel_err);
        }
        assert!(results.len() > 30);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let c = case(vec![Tensor::vector(vec![0.3, -0.7])], |t, v| {
            // the factor depends on x but is recorded as a constant
            let x = t.value(v[0]).clone();
            let shifted = t.constant(x.map(f64::exp));
            t.mul(shifted, v[0])
        });
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(run_case(&c, &mut rng).unwrap() > GRADCHECK_TOLERANCE);
    }

    #[test]
    fn zero_trials_rejected() {
        assert!(matches!(run_gradcheck(0, 1), Err(Error::Config(_))));
    }
}
