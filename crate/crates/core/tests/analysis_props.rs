mod common;

use proptest::prelude::*;
use vibprune_core::analysis::{dense_pruning_pattern, head_js, js_divergence, pruning_pattern, token_attention};
use vibprune_core::data::{generate, Dataset, TaskKind, TaskSpec};
use vibprune_core::extract::extract_dense;
use vibprune_core::model::ModelConfig;

fn cfg() -> ModelConfig {
    ModelConfig { vocab_size: 16, max_seq: 12, ..common::config(16, 2, 4, 32) }
}

fn data() -> Dataset {
    generate(&TaskSpec::new(TaskKind::MajorityPair, 16, 12, 200, 7)).unwrap().train
}

#[test]
fn js_matrix_is_a_bounded_symmetric_divergence() {
    let m = common::student::<f32>(&cfg(), 1);
    let r = head_js(&m, &data()).unwrap();
    let n = r.heads.len();
    assert_eq!(n, 8);
    for i in 0..n {
        assert_eq!(r.matrix[i][i], 0.0);
        for j in 0..n {
            assert_eq!(r.matrix[i][j], r.matrix[j][i]);
            assert!(r.matrix[i][j] >= 0.0 && r.matrix[i][j] <= core::f64::consts::LN_2 + 1e-9);
        }
    }
    // ×10 weights give sharply different heads
    assert!(r.matrix[0][1] > 1e-3);
}

#[test]
fn js_matrix_skips_dropped_heads() {
    let mut m = common::student::<f32>(&cfg(), 2);
    let heads = m.gates().unwrap().layers[0].heads.mu;
    m.params.get_mut(heads).data_mut()[2] = 0.0;
    let r = head_js(&m, &data()).unwrap();
    assert_eq!(r.heads.len(), 7);
    assert!(!r.heads.contains(&(0, 2)));
}

#[test]
fn token_partition_masses_sum_to_one() {
    let m = common::student::<f32>(&cfg(), 3);
    let d = data();
    let parts: [Vec<usize>; 3] = [vec![0, 1], vec![2, 3], (4..16).collect()];
    let stats: Vec<_> = parts.iter().map(|p| token_attention(&m, &d, p).unwrap()).collect();
    let all = token_attention(&m, &d, &(0..16).collect::<Vec<_>>()).unwrap();
    let none = token_attention(&m, &d, &[]).unwrap();
    for l in 0..2 {
        for h in 0..4 {
            let s: f64 = stats.iter().map(|st| st.token_mass[l][h]).sum();
            assert!((s - 1.0).abs() < 1e-5, "layer {l} head {h}: {s}");
            assert!((all.token_mass[l][h] - 1.0).abs() < 1e-5);
            assert_eq!(none.token_mass[l][h], 0.0);
            let local = all.prev[l][h] + all.cur[l][h] + all.next[l][h];
            assert!((-1e-9..=1.0 + 1e-5).contains(&local));
        }
    }
}

#[test]
fn gate_pattern_matches_extracted_pattern() {
    let c = cfg();
    let fresh = common::student::<f32>(&c, 4);
    let p = pruning_pattern(&fresh);
    assert_eq!(p.width_ratio, 1.0);
    assert!(p.layers.iter().all(|l| l.alive && l.heads_ratio == 1.0 && l.inter_ratio == 1.0 && l.out_ratio == 1.0));

    let mut m = fresh;
    let mut rng = common::rng(4);
    for i in 0..20 {
        common::assign_extractable(&mut m, [0.4, 0.7][i % 2], &mut rng);
        let dense = extract_dense(&m).unwrap();
        assert_eq!(pruning_pattern(&m), dense_pruning_pattern(&dense));
    }
}

#[test]
fn dead_layer_is_reported() {
    let mut m = common::student::<f32>(&cfg(), 5);
    let l = m.gates().unwrap().layers[0].clone();
    m.params.get_mut(l.layer_mha.mu).data_mut()[0] = 0.0;
    m.params.get_mut(l.layer_ffn.mu).data_mut()[0] = 0.0;
    let p = pruning_pattern(&m);
    assert!(!p.layers[0].alive && !p.layers[0].mha_alive && !p.layers[0].ffn_alive);
    assert!(p.layers[1].alive);
    assert_eq!(p.layers_kept(), 1);
    assert_eq!(p, dense_pruning_pattern(&extract_dense(&m).unwrap()));
}

fn dist(v: Vec<f64>) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

proptest! {
    #[test]
    fn js_is_symmetric_and_bounded(
        p in prop::collection::vec(0.0f64..1.0, 6).prop_filter("mass", |v| v.iter().sum::<f64>() > 1e-3),
        q in prop::collection::vec(0.0f64..1.0, 6).prop_filter("mass", |v| v.iter().sum::<f64>() > 1e-3),
    ) {
        let (p, q) = (dist(p), dist(q));
        let a = js_divergence(&p, &q);
        prop_assert!((a - js_divergence(&q, &p)).abs() < 1e-15);
        prop_assert!((0.0..=core::f64::consts::LN_2 + 1e-9).contains(&a));
        prop_assert!(js_divergence(&p, &p).abs() < 1e-12);
    }
}

