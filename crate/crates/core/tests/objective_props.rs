mod common;

use proptest::prelude::*;
use rand::Rng as _;
use vibprune_core::extract::extract_dense;
use vibprune_core::model::GatedTransformer;
use vibprune_core::objective::{layer_distill, layer_map, pred_distill, CountModel, KlDirection, Keeps, Metric};
use vibprune_core::tensor::{gradcheck, Graph, Tensor};

#[test]
fn hard_sparsity_equals_extraction_ratio() {
    let cfg = common::config(16, 2, 4, 32);
    let seq = cfg.max_seq;
    let teacher = GatedTransformer::<f64>::build_teacher(&cfg, 0).unwrap();
    let base = extract_dense(&teacher).unwrap();
    let (bp, bf) = (base.param_count() as f64, base.flop_count(seq) as f64);
    let counts = [Metric::Parameters, Metric::Flops].map(|m| CountModel::new(&cfg, m, seq).unwrap());
    assert_eq!(counts[0].total_base, bp);
    assert_eq!(counts[1].total_base, bf);

    let mut m = common::student::<f64>(&cfg, 0);
    let mut rng = common::rng(21);
    for i in 0..50 {
        common::assign_extractable(&mut m, [0.3, 0.6, 0.9][i % 3], &mut rng);
        let dense = extract_dense(&m).unwrap();
        let want = [1.0 - dense.param_count() as f64 / bp, 1.0 - dense.flop_count(seq) as f64 / bf];
        for (c, w) in counts.iter().zip(want) {
            let mut g = Graph::<f64>::new();
            let keeps = Keeps::hard(&mut g, &m, 0.0).unwrap();
            let s = c.sparsity(&mut g, &keeps).unwrap();
            assert!((g.scalar(s) - w).abs() < 1e-6, "{:?} assignment {i}: {} vs {w}", c.metric, g.scalar(s));
        }
    }
}

fn keeps_from(g: &mut Graph<f64>, v: &[f64], width: usize, layers: usize, heads: usize, ffn: usize) -> Keeps {
    let mut it = v.iter().copied();
    let mut take = |n: usize| -> Vec<f64> { (0..n).map(|_| it.next().unwrap()).collect() };
    let w = take(width);
    let ls: Vec<[Vec<f64>; 5]> = (0..layers).map(|_| [take(heads), take(ffn), take(width), take(1), take(1)]).collect();
    Keeps::constant(g, &w, &ls).unwrap()
}

proptest! {
    #[test]
    fn expected_sparsity_is_bounded_and_monotone(
        v in prop::collection::vec(0.0f64..1.0, 8 + 2 * (2 + 12 + 8 + 2)),
        pick in 0usize..56,
        bump in 0.0f64..1.0,
        flops in any::<bool>(),
    ) {
        let cfg = common::config(8, 2, 2, 12);
        let metric = if flops { Metric::Flops } else { Metric::Parameters };
        let c = CountModel::new(&cfg, metric, 5).unwrap();
        let s_of = |v: &[f64]| {
            let mut g = Graph::<f64>::new();
            let k = keeps_from(&mut g, v, 8, 2, 2, 12);
            let s = c.sparsity(&mut g, &k).unwrap();
            g.scalar(s)
        };
        let s = s_of(&v);
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&s), "{s}");
        let mut up = v.clone();
        up[pick] = (up[pick] + bump).min(1.0);
        prop_assert!(s_of(&up) <= s + 1e-12);
        prop_assert!((s_of(&vec![0.0; v.len()]) - 1.0).abs() < 1e-12);
        prop_assert!(s_of(&vec![1.0; v.len()]).abs() < 1e-12);
    }

    #[test]
    fn pred_distill_is_a_divergence(a in prop::collection::vec(-5.0f64..5.0, 12), b in prop::collection::vec(-5.0f64..5.0, 12)) {
        for dir in [KlDirection::StudentTeacher, KlDirection::TeacherStudent] {
            let mut g = Graph::<f64>::new();
            let s = g.constant(Tensor::from_f64(&[4, 3], &a).unwrap()).unwrap();
            let t = Tensor::from_f64(&[4, 3], &b).unwrap();
            let d = pred_distill(&mut g, s, &t, dir).unwrap();
            prop_assert!(g.scalar(d) >= -1e-12);
            let same = pred_distill(&mut g, s, &Tensor::from_f64(&[4, 3], &a).unwrap(), dir).unwrap();
            prop_assert!(g.scalar(same).abs() < 1e-12);
        }
    }
}

#[test]
fn layer_map_matches_exhaustive_search() {
    let mut rng = common::rng(5);
    let (b, s, d) = (2, 3, 4);
    let n = b * s * d;
    let rand_t = |rng: &mut vibprune_core::Rng, shape: &[usize]| {
        let len: usize = shape.iter().product();
        Tensor::from_f64(shape, &(0..len).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>()).unwrap()
    };
    for _ in 0..200 {
        let ls = rng.random_range(1..5);
        let lt = rng.random_range(1..5);
        let hs: Vec<Tensor<f64>> = (0..ls).map(|_| rand_t(&mut rng, &[b, s, d])).collect();
        let ht: Vec<Tensor<f64>> = (0..lt).map(|_| rand_t(&mut rng, &[b, s, d])).collect();
        let w = rand_t(&mut rng, &[d, d]);
        let mut alive: Vec<bool> = (0..ls).map(|_| rng.random_bool(0.6)).collect();
        alive[rng.random_range(0..ls)] = true;
        let teacher_layers: Vec<usize> = (0..lt).collect();
        let got = layer_map(&hs, &ht, &teacher_layers, &w, &alive).unwrap();

        for (i, &mi) in got.iter().enumerate() {
            let mse = |j: usize| -> f64 {
                let (x, y, w) = (hs[j].data(), ht[i].data(), w.data());
                (0..n / d)
                    .flat_map(|r| (0..d).map(move |c| (r, c)))
                    .map(|(r, c)| {
                        let p: f64 = (0..d).map(|k| x[r * d + k] * w[k * d + c]).sum();
                        (p - y[r * d + c]).powi(2)
                    })
                    .sum::<f64>()
                    / n as f64
            };
            let best = (0..ls).filter(|&j| alive[j]).map(|j| (j, mse(j))).fold(None, |acc: Option<(usize, f64)>, (j, e)| match acc {
                Some((_, be)) if be <= e => acc,
                _ => Some((j, e)),
            });
            assert_eq!(mi, best.unwrap().0);
        }
    }
}

#[test]
fn layer_distill_gradient_in_projection() {
    let mut rng = common::rng(6);
    let mut r = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    let hs: Vec<Tensor<f64>> = (0..2).map(|_| Tensor::from_f64(&[2, 3, 4], &r(24)).unwrap()).collect();
    let ht: Vec<Tensor<f64>> = (0..3).map(|_| Tensor::from_f64(&[2, 3, 4], &r(24)).unwrap()).collect();
    let w = Tensor::from_f64(&[4, 4], &r(16)).unwrap();
    let mapping = [1, 0, 1];
    let e = gradcheck(
        |g, v, _| {
            let s: Vec<_> = hs.iter().map(|h| g.constant(h.clone())).collect::<Result<_, _>>()?;
            layer_distill(g, &s, &ht, &[0, 1, 2], v[0], &mapping)
        },
        &[w],
        1e-6,
        0,
    )
    .unwrap();
    assert!(e < 1e-4, "{e}");
}
