mod common;

use common::{small_config, small_dataset};
use m3l_core::backbone::Modality;
use m3l_core::eval::{evaluate_scenario, Scenario};
use m3l_core::experiment::run_training;
use m3l_core::fusion::{ensemble, linear_fuse, token_exchange, Fill, FusionConfig, Heads, MaskState, ModelKind, SegModel};
use m3l_core::numerics::{Graph, NdArray, ParamStore, Var};
use m3l_core::semisup::TrainMode;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn image(g: &mut Graph<f64>, channels: usize, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..2 * channels * 64).map(|_| rng.gen::<f64>()).collect();
    g.constant(NdArray::from_vec([2, channels, 8, 8], data).unwrap())
}

fn with_alpha(kind: ModelKind, alpha: f64) -> SegModel {
    SegModel::tiny(
        kind,
        FusionConfig {
            alpha,
            ..FusionConfig::default()
        },
    )
    .unwrap()
}

#[test]
fn lf_with_unit_alpha_is_two_unimodal_models() {
    let lf = with_alpha(ModelKind::Lf, 1.0);
    let mut lf_store = lf.init_params::<f64>(7).unwrap();
    // Non-trivial decoder and LN values so the comparison is not vacuous.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for (_, e) in lf_store.iter_mut() {
        for v in e.value.data_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
    let mut g = Graph::no_grad();
    let (r, d) = (image(&mut g, 3, 1), image(&mut g, 1, 2));
    let out = lf.forward(&mut g, &lf_store, Some(r), Some(d), &[MaskState::NONE; 2]).unwrap();
    let Heads::Triple(heads) = out.heads else { panic!("lf has three heads") };
    for (kind, head) in [(ModelKind::UniRgb, heads.rgb), (ModelKind::UniDepth, heads.depth)] {
        let uni = with_alpha(kind, 1.0);
        let fresh = uni.init_params::<f64>(0).unwrap();
        let mut shared = ParamStore::new();
        for (name, e) in fresh.iter() {
            let v = lf_store.value(name).unwrap().clone();
            shared.insert_entry(name.clone(), v, e.group, e.trainable).unwrap();
        }
        let y = uni.forward(&mut g, &shared, Some(r), Some(d), &[MaskState::NONE; 2]).unwrap();
        let diff = g.value(y.primary()).max_abs_diff(g.value(head));
        assert!(diff < 1e-6, "{kind}: {diff}");
    }
}

#[test]
fn masked_trained_lf_ignores_the_missing_input() {
    let cfg = small_config(ModelKind::Lf, TrainMode::M3l);
    let ds = small_dataset(&cfg);
    let run = run_training(&cfg, &ds, None, None).unwrap();
    let model = cfg.model_spec().unwrap();
    let store = run.best.cast::<f64>();
    for fill in [Fill::LearnedToken, Fill::Zeros] {
        for missing in Modality::ALL {
            let masks = [MaskState::new(Some(missing), fill); 2];
            let run_with = |seed: Option<u64>| {
                let mut g = Graph::no_grad();
                let r = image(&mut g, 3, 11);
                let d = image(&mut g, 1, 12);
                let other = seed.map(|s| image(&mut g, missing.channels(), s));
                let (r, d) = match missing {
                    Modality::Rgb => (other, Some(d)),
                    Modality::Depth => (Some(r), other),
                };
                let out = model.forward(&mut g, &store, r, d, &masks).unwrap();
                g.value(out.primary()).clone()
            };
            let a = run_with(Some(20));
            assert_eq!(a, run_with(Some(21)), "{fill:?} {missing:?}");
            assert_eq!(a, run_with(None));
        }
    }
    let mut g = Graph::no_grad();
    let (r, d) = (image(&mut g, 3, 1), image(&mut g, 1, 2));
    let token = model.forward(&mut g, &store, Some(r), Some(d), &[MaskState::new(Some(Modality::Depth), Fill::LearnedToken); 2]).unwrap();
    let zeros = model.forward(&mut g, &store, Some(r), Some(d), &[MaskState::new(Some(Modality::Depth), Fill::Zeros); 2]).unwrap();
    assert!(g.value(token.primary()).max_abs_diff(g.value(zeros.primary())) > 0.0);
}

#[test]
fn missing_modality_scores_never_read_that_modality() {
    let cfg = small_config(ModelKind::Lf, TrainMode::M3l);
    let ds = small_dataset(&cfg);
    let run = run_training(&cfg, &ds, None, None).unwrap();
    let model = cfg.model_spec().unwrap();
    let mut altered = small_dataset(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for &i in &ds.split.test {
        let mut s = altered.get(i).unwrap();
        s.depth.iter_mut().for_each(|v| *v = rng.gen());
        altered.set(i, s).unwrap();
    }
    for fill in [Fill::LearnedToken, Fill::Zeros] {
        let score = |d: &m3l_core::data::Dataset, sc| evaluate_scenario(&model, &run.best, d, &d.split.test, sc, fill, 4).unwrap();
        assert_eq!(score(&ds, Scenario::RgbOnly), score(&altered, Scenario::RgbOnly));
    }
}

fn arr(shape: &[usize], v: &[f64]) -> NdArray<f64> {
    NdArray::from_vec(shape.to_vec(), v.to_vec()).unwrap()
}

proptest! {
    #[test]
    fn ensemble_is_exact_and_scale_free(
        a in proptest::collection::vec(-3.0f64..3.0, 12),
        b in proptest::collection::vec(-3.0f64..3.0, 12),
        raw in -4.0f64..4.0,
        scale in 0.1f64..10.0,
    ) {
        let mut g = Graph::no_grad();
        let (ya, yb) = (g.constant(arr(&[1, 3, 2, 2], &a)), g.constant(arr(&[1, 3, 2, 2], &b)));
        let l = g.constant(arr(&[1], &[raw]));
        let ens = ensemble(&mut g, ya, yb, l).unwrap();
        let lam = 1.0 / (1.0 + (-raw).exp());
        for (i, &v) in g.value(ens).data().iter().enumerate() {
            prop_assert!((v - (lam * a[i] + (1.0 - lam) * b[i])).abs() < 1e-12);
        }
        let sa: Vec<f64> = a.iter().map(|v| v * scale).collect();
        let sb: Vec<f64> = b.iter().map(|v| v * scale).collect();
        let (za, zb) = (g.constant(arr(&[1, 3, 2, 2], &sa)), g.constant(arr(&[1, 3, 2, 2], &sb)));
        let scaled = ensemble(&mut g, za, zb, l).unwrap();
        // Skip near-ties, where rounding alone could flip the winner.
        let (_, ia) = g.value(ens).argmax(1).unwrap();
        let (_, ib) = g.value(scaled).argmax(1).unwrap();
        let e = g.value(ens).data();
        for p in 0..4 {
            let mut col: Vec<f64> = (0..3).map(|k| e[k * 4 + p]).collect();
            col.sort_by(f64::total_cmp);
            if col[2] - col[1] > 1e-9 {
                prop_assert_eq!(ia[p], ib[p]);
            }
        }
    }

    #[test]
    fn fusing_equal_tokens_is_identity(t in proptest::collection::vec(-3.0f64..3.0, 6), alpha in 0.0f64..=1.0) {
        let mut g = Graph::no_grad();
        let x = g.constant(arr(&[2, 3], &t));
        let (p, q) = linear_fuse(&mut g, x, x, alpha).unwrap();
        for v in [p, q] {
            prop_assert!(g.value(v).max_abs_diff(g.value(x)) < 1e-12);
        }
    }

    #[test]
    fn zero_threshold_never_exchanges(
        a in proptest::collection::vec(-3.0f64..3.0, 8),
        b in proptest::collection::vec(-3.0f64..3.0, 8),
        scores in proptest::collection::vec(0.0f64..1.0, 4),
    ) {
        let mut g = Graph::no_grad();
        let (x, y) = (g.constant(arr(&[4, 2], &a)), g.constant(arr(&[4, 2], &b)));
        let out = token_exchange(&mut g, x, y, &scores, 0.0).unwrap();
        prop_assert_eq!(g.value(out), g.value(x));
    }
}
