use super::*;
use crate::model::{ModelConfig, Params};
use crate::textproc::MASK_ID;

const LN2: f64 = std::f64::consts::LN_2;

fn itc_value(img: &Tensor, txt: &Tensor, queues: &mut QueueState, tau: f64) -> (f64, Graph, Var) {
    let mut g = Graph::train();
    let i = g.leaf(img.clone());
    let t = g.leaf(txt.clone());
    let lt = g.leaf(Tensor::scalar(tau.ln()));
    let out = itc_loss(&mut g, i, t, img, txt, queues, lt, None).unwrap();
    (g.scalar(out.loss), g, out.loss)
}

#[test]
fn itc_single_candidate_is_zero() {
    let x = Tensor::row(&[0.3, -0.4]);
    let (l, _, _) = itc_value(&x, &x, &mut QueueState::new(8, 2), 0.07);
    assert!(l.abs() < 1e-15);
}

#[test]
fn itc_orthonormal_pair_by_hand() {
    let e = Tensor::identity(2);
    let (l, _, _) = itc_value(&e, &e, &mut QueueState::new(8, 2), 1.0);
    let expected = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
    assert!((l - expected).abs() < 1e-14, "{l} vs {expected}");
}

#[test]
fn itc_enqueues_and_queue_entries_are_negatives() {
    let mut q = QueueState::new(4, 2);
    let e = Tensor::identity(2);
    itc_value(&e, &e, &mut q, 1.0);
    assert_eq!(q.len(), 2);
    // A queued duplicate of the positive lowers its probability.
    let (l, _, _) = itc_value(&e, &e, &mut q, 1.0);
    let expected = -(1f64.exp() / (2.0 * 1f64.exp() + 2.0)).ln();
    assert!((l - expected).abs() < 1e-14);
}

#[test]
fn itc_identity_targets_count_queued_copies_as_positives() {
    let e = Tensor::identity(2);
    let queued = Tensor::from_rows(&[vec![0.6, 0.8], vec![1.0, 0.0]]).unwrap();
    let run = |tags: Option<&[usize]>, ids: Option<&[usize]>| {
        let mut q = QueueState::new(4, 2);
        q.enqueue_with_ids(&queued, &queued, tags).unwrap();
        let mut g = Graph::train();
        let i = g.leaf(e.clone());
        let t = g.leaf(e.clone());
        let lt = g.leaf(Tensor::scalar(0.0));
        let out = itc_loss(&mut g, i, t, &e, &e, &mut q, lt, ids).unwrap();
        assert_eq!(q.len(), 4);
        (g.scalar(out.loss), q)
    };
    let lse = |z: &[f64]| z.iter().map(|v| v.exp()).sum::<f64>().ln();
    // Candidates: e0, e1, then the queued rows; τ = 1.
    let row0 = [1.0, 0.0, 0.6, 1.0];
    let row1 = [0.0, 1.0, 0.8, 0.0];
    let one_hot = 0.5 * ((lse(&row0) - 1.0) + (lse(&row1) - 1.0));
    let soft = 0.5 * ((lse(&row0) - 0.5 * (1.0 + 0.6)) + (lse(&row1) - 1.0));

    let (l, q) = run(Some(&[7, 3]), Some(&[7, 9]));
    assert!((l - soft).abs() < 1e-14, "{l} vs {soft}");
    assert_eq!(q.ids(), &[Some(7), Some(3), Some(7), Some(9)]);
    let (l, _) = run(Some(&[7, 3]), None);
    assert!((l - one_hot).abs() < 1e-14);
    let (l, q) = run(None, Some(&[7, 9]));
    assert!((l - one_hot).abs() < 1e-14, "untagged rows stay negatives");
    assert_eq!(q.ids(), &[None, None, Some(7), Some(9)]);

    let mut q = QueueState::new(4, 2);
    assert!(q.enqueue_with_ids(&queued, &queued, Some(&[1])).is_err());
    let mut g = Graph::train();
    let i = g.leaf(e.clone());
    let lt = g.leaf(Tensor::scalar(0.0));
    assert!(itc_loss(&mut g, i, i, &e, &e, &mut q, lt, Some(&[1])).is_err());
}

#[test]
fn itc_momentum_side_receives_no_gradient() {
    let img = Tensor::from_rows(&[vec![1.0, 0.2], vec![-0.3, 0.9]]).unwrap();
    let txt = Tensor::from_rows(&[vec![0.8, 0.1], vec![0.2, 1.1]]).unwrap();
    let mut g = Graph::train();
    let i = g.leaf(img.clone());
    let t = g.leaf(txt.clone());
    let lt = g.leaf(Tensor::scalar(0.07f64.ln()));
    let mut q = QueueState::new(4, 2);
    let out = itc_loss(&mut g, i, t, &img, &txt, &mut q, lt, None).unwrap();
    g.backward(out.loss).unwrap();
    assert!(g.grad(i).max_abs() > 0.0 && g.grad(lt).max_abs() > 0.0);
    let constants: Vec<Var> = g.vars().filter(|&v| g.op_tag(v) == "const").collect();
    assert!(constants.len() >= 2);
    for v in constants {
        assert!(!g.has_grad(v));
    }
    for row in 0..2 {
        let s: f64 = out.p_i2t.row_slice(row).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn itm_cases() {
    let mut g = Graph::train();
    let z = g.leaf(Tensor::scalar(0.0));
    let l = itm_loss(&mut g, &[z], &[1.0]).unwrap();
    assert!((g.scalar(l) - LN2).abs() < 1e-15);
    let big = g.leaf(Tensor::scalar(20.0));
    let l = itm_loss(&mut g, &[big], &[1.0]).unwrap();
    assert!(g.scalar(l) < 1e-8);
    // Same logit for a positive and a negative pair: minimum 2 ln 2 at 0.
    for z0 in [-1.0, -0.1, 0.0, 0.1, 1.0] {
        let z = g.leaf(Tensor::scalar(z0));
        let l = itm_loss(&mut g, &[z, z], &[1.0, 0.0]).unwrap();
        assert!(g.scalar(l) >= 2.0 * LN2 - 1e-15);
        if z0 == 0.0 {
            assert!((g.scalar(l) - 2.0 * LN2).abs() < 1e-15);
        }
    }
    assert!(itm_loss(&mut g, &[z], &[]).is_err());
}

#[test]
fn negatives_batch_of_two_and_one() {
    let sims = Tensor::from_rows(&[vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap();
    let mut rng = Rng::seed(0);
    for mode in [NegSampling::Hard, NegSampling::Uniform] {
        let n = sample_negatives(&sims, 0.07, mode, &mut rng).unwrap();
        assert_eq!(n.text_for_image, vec![1, 0]);
        assert_eq!(n.image_for_text, vec![1, 0]);
    }
    let one = sample_negatives(&Tensor::row(&[1.0]), 0.07, NegSampling::Hard, &mut rng).unwrap();
    assert_eq!(one, Negatives::default());
}

#[test]
fn uniform_negatives_are_uniform() {
    let sims = Tensor::from_rows(&[
        vec![0.9, 0.5, -0.2, 0.1],
        vec![0.0, 0.9, 0.3, 0.3],
        vec![0.1, 0.2, 0.9, 0.4],
        vec![0.6, 0.1, 0.0, 0.9],
    ])
    .unwrap();
    let mut rng = Rng::seed(42);
    let mut counts = [0usize; 4];
    let n = 10_000;
    for _ in 0..n {
        counts[sample_negatives(&sims, 0.07, NegSampling::Uniform, &mut rng).unwrap().text_for_image[0]] += 1;
    }
    assert_eq!(counts[0], 0);
    for &c in &counts[1..] {
        assert!((c as f64 / n as f64 - 1.0 / 3.0).abs() < 0.02, "{counts:?}");
    }
}

#[test]
fn hard_negatives_follow_softmax_and_skip_minus_infinity() {
    let sims = [
        [1.0, 0.5, f64::NEG_INFINITY],
        [0.0, 1.0, 0.0],
        [0.2, 0.0, 1.0],
    ];
    let sim = |i: usize, j: usize| sims[i][j];
    let mut rng = Rng::seed(1);
    for _ in 0..2000 {
        let n = sample_from(3, sim, 0.1, NegSampling::Hard, &mut rng).unwrap();
        assert_eq!(n.text_for_image[0], 1);
        assert_eq!(n.image_for_text[2], 1);
    }
    // Candidates for text 0: images 1 (0.0) and 2 (0.2) at τ = 0.1.
    let p2 = 1.0 / (1.0 + (-2.0f64).exp());
    let trials = 20_000;
    let hits = (0..trials)
        .filter(|_| sample_from(3, sim, 0.1, NegSampling::Hard, &mut rng).unwrap().image_for_text[0] == 2)
        .count();
    assert!((hits as f64 / trials as f64 - p2).abs() < 0.015);
}

fn triplet(pos: f64, neg_i: f64, neg_t: f64, delta: f64, dir: TripletDirection) -> f64 {
    let mut g = Graph::train();
    let p = g.leaf(Tensor::scalar(pos));
    let a = g.leaf(Tensor::scalar(neg_i));
    let b = g.leaf(Tensor::scalar(neg_t));
    let l = fusion_triplet_loss(&mut g, p, a, b, delta, dir).unwrap();
    g.scalar(l)
}

#[test]
fn triplet_cases() {
    let s = TripletDirection::Standard;
    assert_eq!(triplet(1.6, 1.0, 1.0, 0.6, s), 0.0);
    assert!((triplet(1.0, 0.8, 0.8, 0.6, s) - 0.32).abs() < 1e-15);
    assert_eq!(triplet(10.0, 0.0, -3.0, 0.6, s), 0.0);
    // The printed order grows as the ranking improves.
    let p = TripletDirection::Printed;
    assert!(triplet(10.0, 0.0, 0.0, 0.6, p) > triplet(1.0, 0.8, 0.8, 0.6, p));
    assert_eq!("printed".parse::<TripletDirection>().unwrap(), p);
    assert!("reverse".parse::<TripletDirection>().is_err());
}

fn toy() -> Params {
    let cfg = ModelConfig {
        d: 8,
        heads: 2,
        n_cross_layers: 2,
        bidiratt_layer: 1,
        proj_dim: 4,
        patch_grid: (2, 2),
        patch_pixels: 3,
        vocab_size: 12,
        ..ModelConfig::default()
    };
    Params::init(&cfg, &mut Rng::seed(4)).unwrap()
}

fn mpm_value(params: &Params, positions: MpmPositions) -> f64 {
    let mut g = Graph::train();
    let net = params.bind(&mut g);
    let img = Tensor::full(&[4, 3], 0.5);
    let image = net.encode_image(&mut g, &img).unwrap();
    let memory = net.image_memory(&mut g, image).unwrap();
    let masked = MaskedPhrase::at(&[5, 6, 7], 1);
    let phrase = net.encode_text(&mut g, &masked.tokens).unwrap();
    let fusion = net.cross_encode(&mut g, phrase, &memory, None).unwrap();
    let l = mpm_loss(&mut g, &net, &fusion, &masked, positions).unwrap();
    g.scalar(l)
}

#[test]
fn mpm_uniform_and_saturated() {
    let mut p = toy();
    let out = p.layout.mpm_out;
    p.store.get_mut(out.w).data_mut().fill(0.0);
    let b = out.b.unwrap();
    p.store.get_mut(b).data_mut().fill(0.0);
    assert!((mpm_value(&p, MpmPositions::Masked) - 12f64.ln()).abs() < 1e-12);
    assert!((mpm_value(&p, MpmPositions::All) - 3.0 * 12f64.ln()).abs() < 1e-12);
    p.store.get_mut(b).data_mut()[6] = 60.0;
    assert!(mpm_value(&p, MpmPositions::Masked) < 1e-12);
    assert_eq!(MASK_ID, 1);
}

#[test]
fn breakdown_combination() {
    let none = LossBreakdown::combine(0.5, 0.25, 0.125, &[], Stage::Two);
    assert_eq!(none.total, 0.875);
    let s1 = LossBreakdown::combine(0.5, 0.25, 0.125, &[(0.3, 0.7)], Stage::One);
    assert_eq!(s1.total, 0.75);
    assert_eq!((s1.tri, s1.biatt_sum, s1.mpm_sum), (0.0, 0.0, 0.0));
    let one = LossBreakdown::combine(0.0, 0.0, 0.0, &[(0.3, 0.7)], Stage::Two);
    let two = LossBreakdown::combine(0.0, 0.0, 0.0, &[(0.3, 0.7), (0.3, 0.7)], Stage::Two);
    assert_eq!(two.biatt_sum + two.mpm_sum, 2.0 * (one.biatt_sum + one.mpm_sum));
    let full = LossBreakdown::combine(0.1, 0.2, 0.3, &[(0.4, 0.5), (0.6, 0.7)], Stage::Two);
    assert!((full.total - (0.1 + 0.2 + 0.3 + 1.0 + 1.2)).abs() < 1e-12);
}

#[test]
fn csv_log_format() {
    let rows = [LogRow {
        step: 3,
        lr: 1e-3,
        losses: LossBreakdown::combine(1.0, 0.5, 0.0, &[], Stage::One),
    }];
    let text = log_csv(&rows);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(LOG_HEADER));
    assert_eq!(lines.next(), Some("3,1e-3,1e0,5e-1,0e0,0e0,0e0,1.5e0"));
}
