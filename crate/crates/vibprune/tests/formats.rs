use proptest::prelude::*;
use vibprune::checkpoint::{self, Model};
use vibprune::datafile;
use vibprune::report::{read_json, write_json, Sidecar};
use vibprune_core::data::{generate, TaskKind, TaskSpec};
use vibprune_core::extract::extract_dense;
use vibprune_core::gates::GateInit;
use vibprune_core::model::{Betas, GatedTransformer, ModelConfig};
use vibprune_core::pipeline::binarize;
use vibprune_core::tensor::Tensor;

fn cfg() -> ModelConfig {
    ModelConfig {
        vocab_size: 12,
        max_seq: 8,
        width: 16,
        layers: 2,
        heads: 4,
        ffn_dim: 24,
        num_classes: 2,
        causal: false,
        dropout: 0.0,
    }
}

fn student(seed: u64) -> GatedTransformer<f32> {
    let t = GatedTransformer::build_teacher(&cfg(), seed).unwrap();
    let init = GateInit { mu_mean: 1.0, mu_std: 0.5, sigma_init: 0.3, seed };
    GatedTransformer::build_student(&t, &init, &Betas::default()).unwrap()
}

fn tensor() -> impl Strategy<Value = (String, Tensor<f32>)> {
    ("[a-z_.0-9]{1,24}", prop::collection::vec(1usize..4, 0..4)).prop_flat_map(|(name, shape)| {
        let n = shape.iter().product::<usize>();
        prop::collection::vec(any::<u32>(), n)
            .prop_map(move |bits| (name.clone(), Tensor::new(&shape, bits.into_iter().map(f32::from_bits).collect()).unwrap()))
    })
}

fn same_bits(a: &[(String, Tensor<f32>)], b: &[(String, Tensor<f32>)]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|((na, ta), (nb, tb))| {
            na == nb && ta.shape() == tb.shape() && ta.data().iter().zip(tb.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        })
}

proptest! {
    #[test]
    fn checkpoint_round_trips_bit_exactly(ts in prop::collection::vec(tensor(), 0..6)) {
        let bytes = checkpoint::encode(&ts).unwrap();
        prop_assert!(same_bits(&checkpoint::decode(&bytes).unwrap(), &ts));
        // every proper prefix is rejected
        for cut in [0, 3, bytes.len() / 2, bytes.len().saturating_sub(1)] {
            if cut < bytes.len() {
                prop_assert!(checkpoint::decode(&bytes[..cut]).is_err());
            }
        }
    }

    #[test]
    fn datafile_round_trips(kind in 0u8..3, seed in 0u64..100) {
        let spec = TaskSpec::new(TaskKind::from_code(kind).unwrap(), 12, 9, 60, seed);
        let d = generate(&spec).unwrap();
        let back = datafile::decode(&datafile::encode(&d).unwrap()).unwrap();
        prop_assert_eq!(&back.train, &d.train);
        prop_assert_eq!(&back.val, &d.val);
        prop_assert_eq!(&back.test, &d.test);
        prop_assert_eq!(back.spec.kind, spec.kind);
        prop_assert_eq!(back.spec.seed, spec.seed);
    }
}

#[test]
fn bad_magic_and_truncation_are_format_errors() {
    let bytes = checkpoint::encode(&[("w".into(), Tensor::new(&[2], vec![1.0, 2.0]).unwrap())]).unwrap();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert_eq!(checkpoint::decode(&bad).unwrap_err().kind(), "format error");
    assert_eq!(checkpoint::decode(&bytes[..bytes.len() - 2]).unwrap_err().kind(), "format error");
    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(checkpoint::decode(&trailing).is_err());

    let d = datafile::encode(&generate(&TaskSpec::new(TaskKind::MajorityPair, 12, 9, 30, 0)).unwrap()).unwrap();
    assert_eq!(datafile::decode(&d[..d.len() - 1]).unwrap_err().kind(), "format error");
    assert_eq!(datafile::decode(&bytes).unwrap_err().kind(), "format error");
}

#[test]
fn models_survive_the_filesystem() {
    let dir = tempfile::tempdir().unwrap();
    let s = student(3);
    let p = dir.path().join("s.vibp");
    checkpoint::save_model(&p, &Model::Gated(s.clone())).unwrap();
    let back = checkpoint::load_gated(&p, &Betas::default()).unwrap();
    assert_eq!(back, s);

    let mut b = s.clone();
    binarize(&mut b, 0.0).unwrap();
    let dense = extract_dense(&b).unwrap();
    let q = dir.path().join("d.vibp");
    checkpoint::save_model(&q, &Model::Dense(dense.clone())).unwrap();
    match checkpoint::load_model(&q, &Betas::default()).unwrap() {
        Model::Dense(d) => assert_eq!(d, dense),
        Model::Gated(_) => panic!("dense checkpoint read back as gated"),
    }
    assert_eq!(checkpoint::load_gated(&q, &Betas::default()).unwrap_err().kind(), "format error");
    assert_eq!(checkpoint::load(&dir.path().join("missing.vibp")).unwrap_err().kind(), "io error");
}

#[test]
fn sidecar_rebuilds_the_pruning_pattern() {
    let dir = tempfile::tempdir().unwrap();
    for seed in 0..5 {
        let mut s = student(seed);
        // mu_std 0.5 leaves some units under the threshold
        binarize(&mut s, 0.0).unwrap();
        let Ok(dense) = extract_dense(&s) else { continue };
        let side = Sidecar::new(&dense, &cfg(), 8).unwrap();
        let p = dir.path().join("side.json");
        write_json(&p, &side).unwrap();
        let back: Sidecar = read_json(&p).unwrap();
        assert_eq!(back, side);
        assert_eq!(back.pattern(), vibprune_core::analysis::pruning_pattern(&s));
        assert_eq!(back.params, dense.param_count());
    }
}
