use proptest::prelude::*;
use suparc_core::autodiff::{cosine_similarity, Tape, Tensor, Var, ARCCOS_EPS};
use suparc_core::data::TextInput;
use suparc_core::evaluation::{compute_metrics, geometry_score, pca_project, Confusion};
use suparc_core::losses::{
    arccos_loss, pair_label, suparc_loss, supervised_ntxent, triplet_modalities_loss, PairMatrix,
};
use suparc_core::model::{encode_text, predict, EncoderConfig, FusionModel};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0f64..2.0, rows * cols)
        .prop_filter("rows must be non-zero", move |d| {
            d.chunks(cols)
                .all(|r| r.iter().map(|v| v * v).sum::<f64>() > 1e-3)
        })
        .prop_map(move |d| Tensor::matrix(rows, cols, d).unwrap())
}

fn labels(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, n)
}

fn loss(h: &Tensor, f: impl FnOnce(&mut Tape, Var) -> suparc_core::Result<Var>) -> f64 {
    let mut tape = Tape::new();
    let v = tape.constant(h.clone());
    let out = f(&mut tape, v).unwrap();
    tape.value(out).item()
}

fn rescale_rows(h: &Tensor, scales: &[f64]) -> Tensor {
    let cols = h.cols();
    let mut out = h.clone();
    for (i, s) in scales.iter().enumerate() {
        out.data_mut()[i * cols..(i + 1) * cols]
            .iter_mut()
            .for_each(|v| *v *= s);
    }
    out
}

fn positives(y: &[f64]) -> Option<PairMatrix> {
    let p = pair_label(y, 0.5).unwrap();
    (p.positive_pairs() > 0).then_some(p)
}

/// A rotation of R^d built from two Householder reflections.
fn rotate_rows(x: &Tensor, u: &[f64], w: &[f64]) -> Tensor {
    let reflect = |row: &[f64], v: &[f64]| -> Vec<f64> {
        let vv: f64 = v.iter().map(|a| a * a).sum();
        let dot: f64 = row.iter().zip(v).map(|(a, b)| a * b).sum();
        row.iter()
            .zip(v)
            .map(|(a, b)| a - 2.0 * dot / vv * b)
            .collect()
    };
    let data = (0..x.rows())
        .flat_map(|i| reflect(&reflect(x.row(i), u), w))
        .collect();
    Tensor::matrix(x.rows(), x.cols(), data).unwrap()
}

proptest! {
    #[test]
    fn cosine_ignores_positive_scale(
        a in prop::collection::vec(-5.0f64..5.0, 6),
        b in prop::collection::vec(-5.0f64..5.0, 6),
        lambda in 1e-3f64..1e3,
        mu in 1e-3f64..1e3,
    ) {
        prop_assume!(a.iter().any(|v| v.abs() > 1e-3) && b.iter().any(|v| v.abs() > 1e-3));
        let sa: Vec<f64> = a.iter().map(|v| v * lambda).collect();
        let sb: Vec<f64> = b.iter().map(|v| v * mu).collect();
        let c0 = cosine_similarity(&a, &b).unwrap();
        let c1 = cosine_similarity(&sa, &sb).unwrap();
        prop_assert!((c0 - c1).abs() <= 1e-12);
    }

    #[test]
    fn arccos_stays_in_clamped_range(x in -3.0f64..3.0) {
        let mut tape = Tape::new();
        let v = tape.param(Tensor::scalar(x));
        let a = tape.arccos(v);
        tape.backward(a).unwrap();
        let lo = (1.0 - ARCCOS_EPS).acos();
        let out = tape.value(a).item();
        prop_assert!(out >= lo - 1e-15 && out <= std::f64::consts::PI - lo + 1e-15);
        let bound = 1.0 / (2.0 * ARCCOS_EPS - ARCCOS_EPS * ARCCOS_EPS).sqrt();
        prop_assert!(tape.grad(v).unwrap()[0].abs() <= bound * (1.0 + 1e-6));
    }

    #[test]
    fn pair_matrix_is_symmetric(y in prop::collection::vec(-1e3f64..1e3, 2..12), th in 0.0f64..2.0) {
        let p = pair_label(&y, th).unwrap();
        for i in 0..y.len() {
            prop_assert_eq!(p.t(i, i), 1);
            prop_assert_eq!(p.delta(i, i), 0.0);
            for j in 0..y.len() {
                prop_assert_eq!(p.t(i, j), p.t(j, i));
                prop_assert_eq!(p.delta(i, j), p.delta(j, i));
                prop_assert_eq!(p.t(i, j) == 1, (y[i] - y[j]).abs() <= th);
            }
        }
    }

    #[test]
    fn suparc_without_margin_is_arccos_without_margin(h in matrix(7, 4), y in labels(7)) {
        let pairs = positives(&y);
        prop_assume!(pairs.is_some());
        let pairs = pairs.unwrap();
        let a = loss(&h, |t, v| suparc_loss(t, v, &pairs, 0.1, 0.0));
        let b = loss(&h, |t, v| arccos_loss(t, v, &pairs, 0.1, 0.0));
        prop_assert!((a - b).abs() <= 1e-12, "{} vs {}", a, b);
    }

    #[test]
    fn contrastive_losses_ignore_row_scale(
        h in matrix(6, 3),
        y in labels(6),
        scales in prop::collection::vec(1e-2f64..1e2, 6),
    ) {
        let pairs = positives(&y);
        prop_assume!(pairs.is_some());
        let pairs = pairs.unwrap();
        let g = rescale_rows(&h, &scales);
        let fs: [&dyn Fn(&Tensor) -> f64; 3] = [
            &|m| loss(m, |t, v| supervised_ntxent(t, v, &pairs, 0.1)),
            &|m| loss(m, |t, v| arccos_loss(t, v, &pairs, 0.1, 0.15)),
            &|m| loss(m, |t, v| suparc_loss(t, v, &pairs, 0.1, 0.15)),
        ];
        for f in fs {
            prop_assert!((f(&h) - f(&g)).abs() <= 1e-9);
        }
    }

    #[test]
    fn suparc_is_monotone_in_margin(h in matrix(6, 3), y in labels(6), m0 in 0.0f64..0.2, dm in 0.0f64..0.1) {
        let pairs = positives(&y);
        prop_assume!(pairs.is_some());
        let pairs = pairs.unwrap();
        let m1 = m0 + dm;
        let n = pairs.len();
        for i in 0..n {
            for j in 0..n {
                if i != j && pairs.t(i, j) == 0 {
                    let theta = cosine_similarity(h.row(i), h.row(j)).unwrap().clamp(-1.0, 1.0).acos();
                    let shifted = theta - m1 * pairs.delta(i, j);
                    prop_assume!(shifted > 0.0 && shifted < std::f64::consts::PI);
                }
            }
        }
        let l0 = loss(&h, |t, v| suparc_loss(t, v, &pairs, 0.1, m0));
        let l1 = loss(&h, |t, v| suparc_loss(t, v, &pairs, 0.1, m1));
        prop_assert!(l1 >= l0 - 1e-12, "{} < {}", l1, l0);
    }

    #[test]
    fn triplet_is_non_negative(
        mats in prop::collection::vec(matrix(4, 3), 7),
        m_tri in 0.0f64..1.0,
    ) {
        let mut tape = Tape::new();
        let v: Vec<Var> = mats.iter().map(|m| tape.constant(m.clone())).collect();
        let out = triplet_modalities_loss(&mut tape, v[0], &[v[1], v[2], v[3]], &[v[4], v[5], v[6]], m_tri).unwrap();
        prop_assert!(tape.value(out).item() >= 0.0);
    }

    #[test]
    fn triplet_vanishes_when_margin_met(h in matrix(4, 3), m_tri in 0.0f64..0.9) {
        // singles identical to h (cosine 1), doubles opposite to h (cosine -1)
        let neg = h.map(|v| -v);
        let mut tape = Tape::new();
        let hv = tape.constant(h.clone());
        let d = tape.constant(neg);
        let out = triplet_modalities_loss(&mut tape, hv, &[hv; 3], &[d; 3], m_tri).unwrap();
        prop_assert_eq!(tape.value(out).item(), 0.0);
    }

    #[test]
    fn metrics_ignore_sample_order(
        pairs in prop::collection::vec((-3.5f64..3.5, -3.0f64..3.0), 3..40),
        seed in any::<u64>(),
    ) {
        let (p, y): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
        let mut order: Vec<usize> = (0..p.len()).collect();
        let mut s = seed;
        for i in (1..order.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            order.swap(i, (s >> 33) as usize % (i + 1));
        }
        let pp: Vec<f64> = order.iter().map(|&i| p[i]).collect();
        let yy: Vec<f64> = order.iter().map(|&i| y[i]).collect();
        let a = compute_metrics(&p, &y).unwrap();
        let b = compute_metrics(&pp, &yy).unwrap();
        prop_assert!((a.mae - b.mae).abs() <= 1e-12);
        prop_assert_eq!((a.acc7, a.acc2_nonneg, a.acc2_pos), (b.acc7, b.acc2_nonneg, b.acc2_pos));
        prop_assert_eq!((a.f1_nonneg, a.f1_pos), (b.f1_nonneg, b.f1_pos));
        for f in [a.f1_nonneg, a.f1_pos] {
            prop_assert!((0.0..=1.0).contains(&f));
        }
    }

    #[test]
    fn f1_is_one_exactly_without_errors(classes in prop::collection::vec(any::<bool>(), 1..30)) {
        let c = Confusion::from_classes(classes.iter().copied(), classes.iter().copied());
        prop_assert_eq!(c.f1(), 1.0);
        let flipped = Confusion::from_classes(classes.iter().map(|b| !b), classes.iter().copied());
        prop_assert!(flipped.f1() < 1.0);
    }

    #[test]
    fn geometry_ignores_global_scale(h in matrix(15, 4), y in labels(15), c in 1e-3f64..1e3) {
        let a = geometry_score(&h, &y).unwrap();
        let b = geometry_score(&h.map(|v| v * c), &y).unwrap();
        prop_assert!((a.score - b.score).abs() <= 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pca_is_rotation_invariant(
        raw in prop::collection::vec(-1.0f64..1.0, 40 * 4),
        u in prop::collection::vec(-1.0f64..1.0, 4),
        w in prop::collection::vec(-1.0f64..1.0, 4),
    ) {
        prop_assume!(u.iter().map(|v| v * v).sum::<f64>() > 0.1 && w.iter().map(|v| v * v).sum::<f64>() > 0.1);
        // well separated spectrum: axis scales 4, 2, 0.5, 0.1
        let scales = [4.0, 2.0, 0.5, 0.1];
        let x = Tensor::matrix(40, 4, raw.iter().enumerate().map(|(k, v)| v * scales[k % 4]).collect()).unwrap();
        let a = pca_project(&x, 2).unwrap();
        let gap = a.eigenvalues[0] / a.eigenvalues[1];
        prop_assume!(gap > 1.2 && a.eigenvalues[1] > 2.0 * a.eigenvalues.get(2).copied().unwrap_or(0.0));
        let b = pca_project(&rotate_rows(&x, &u, &w), 2).unwrap();
        prop_assert!(a.converged && b.converged);
        prop_assert!(a.explained_ratio.iter().sum::<f64>() <= 1.0 + 1e-12);
        for k in 0..2 {
            let dot: f64 = (0..40).map(|i| a.coords.row(i)[k] * b.coords.row(i)[k]).sum();
            let sign = dot.signum();
            for i in 0..40 {
                prop_assert!((a.coords.row(i)[k] - sign * b.coords.row(i)[k]).abs() <= 1e-5);
            }
            prop_assert!((a.eigenvalues[k] - b.eigenvalues[k]).abs() <= 1e-8 * a.eigenvalues[0]);
        }
    }

    #[test]
    fn predictions_stay_inside_label_range(fused in prop::collection::vec(-1e4f64..1e4, 3 * 32), seed in 0u64..50) {
        let model = FusionModel::init(&EncoderConfig::default(), seed).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind_frozen(&mut tape);
        let f = tape.constant(Tensor::matrix(3, 32, fused).unwrap());
        let out = predict(&mut tape, &bound, f).unwrap();
        for &p in tape.value(out).data() {
            prop_assert!(p > -3.0 && p < 3.0);
        }
    }

    #[test]
    fn text_encoding_ignores_token_order(tokens in prop::collection::vec(0usize..512, 1..20), seed in 0u64..20) {
        let config = EncoderConfig::default();
        let model = FusionModel::init(&config, seed).unwrap();
        let mut reversed = tokens.clone();
        reversed.reverse();
        reversed.rotate_left(tokens.len() / 2);
        let mut tape = Tape::new();
        let bound = model.bind_frozen(&mut tape);
        let a = TextInput::Tokens(tokens);
        let b = TextInput::Tokens(reversed);
        let ea = encode_text(&mut tape, &bound, &config, &[&a]).unwrap();
        let eb = encode_text(&mut tape, &bound, &config, &[&b]).unwrap();
        prop_assert_eq!(tape.value(ea), tape.value(eb));
    }
}
