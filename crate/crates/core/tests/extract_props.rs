mod common;

use vibprune_core::extract::{extract_dense, DenseModel};
use vibprune_core::gates::GateInit;
use vibprune_core::model::{Betas, GatedTransformer, Mode, Tokens};
use vibprune_core::pipeline::binarize;
use vibprune_core::tensor::Real;
use vibprune_core::Error;

fn max_gap<R: Real>(m: &GatedTransformer<R>, d: &DenseModel<R>, tokens: &Tokens) -> f64 {
    let a = m.logits(tokens, Mode::Eval, &mut common::rng(0)).unwrap();
    let b = d.forward(tokens).unwrap();
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
        .fold(0.0, f64::max)
}

fn extraction_gap<R: Real>(weight_scale: f64) -> f64 {
    let cfg = common::config(16, 2, 4, 32);
    let mut rng = common::rng(2);
    let mut worst = 0.0f64;
    for i in 0..20 {
        let mut t = GatedTransformer::<R>::build_teacher(&cfg, i).unwrap();
        for id in t.weight_ids() {
            for v in t.params.get_mut(id).data_mut() {
                *v *= R::from_f64(weight_scale);
            }
        }
        let init = GateInit { mu_mean: 1.0, mu_std: 0.0, sigma_init: 0.1, seed: i };
        let mut m = GatedTransformer::build_student(&t, &init, &Betas::default()).unwrap();
        common::assign_extractable(&mut m, 0.6, &mut rng);
        binarize(&mut m, 0.0).unwrap();
        let d = extract_dense(&m).unwrap();
        let tokens = common::random_tokens(&cfg, 100, cfg.max_seq, &mut rng);
        worst = worst.max(max_gap(&m, &d, &tokens));
    }
    worst
}

#[test]
fn dense_model_matches_masked_forward() {
    let gap = extraction_gap::<f32>(1.0);
    assert!(gap < 1e-5, "{gap}");
}

#[test]
fn dense_model_is_exact_for_sharp_networks() {
    // at 10× weights the f32 gap is rounding amplified by O(30) logits;
    // in f64 the two forwards agree to rounding
    let gap = extraction_gap::<f64>(10.0);
    assert!(gap < 1e-9, "{gap}");
}

#[test]
fn one_masked_head_shrinks_the_layer() {
    let cfg = common::config(8, 2, 2, 12);
    let mut m = common::student::<f64>(&cfg, 1);
    let heads = m.gates().unwrap().layers[1].heads.clone();
    m.params.get_mut(heads.mu).data_mut()[0] = 0.0;
    let d = extract_dense(&m).unwrap();
    let s = d.survival();
    assert_eq!(s.heads, vec![2, 1]);
    let tokens = common::random_tokens(&cfg, 100, 6, &mut common::rng(1));
    assert!(max_gap(&m, &d, &tokens) < 1e-9);
}

#[test]
fn dropped_layer_is_deleted() {
    let cfg = common::config(8, 2, 2, 12);
    let mut m = common::student::<f64>(&cfg, 2);
    let l = m.gates().unwrap().layers[1].clone();
    m.params.get_mut(l.layer_mha.mu).data_mut()[0] = 0.0;
    m.params.get_mut(l.layer_ffn.mu).data_mut()[0] = 0.0;
    let d = extract_dense(&m).unwrap();
    assert_eq!(d.layers.len(), 1);
    assert_eq!(d.survival().layers_alive(), 1);
}

#[test]
fn extraction_is_idempotent_and_serializable() {
    let cfg = common::config(16, 2, 4, 32);
    let mut m = common::student::<f32>(&cfg, 3);
    common::assign_extractable(&mut m, 0.5, &mut common::rng(3));
    let d = extract_dense(&m).unwrap();
    assert_eq!(d.extract(), d);
    assert_eq!(DenseModel::from_named_tensors(&d.named_tensors()).unwrap(), d);
}

#[test]
fn empty_width_is_degenerate() {
    let cfg = common::config(8, 2, 2, 12);
    let mut m = common::student::<f64>(&cfg, 4);
    let w = m.gates().unwrap().embedding.mu;
    m.params.get_mut(w).data_mut().fill(0.0);
    assert!(matches!(extract_dense(&m), Err(Error::DegenerateModel(_))));
}
