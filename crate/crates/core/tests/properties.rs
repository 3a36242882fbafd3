use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use smc::cohort::{build_cohort_densities, rejection_subsample, DemographicsTable, PooledCohort};
use smc::data::{Dataset, Matrix};
use smc::ensembles::{bic_weights, combine};
use smc::representation::{
    loss_con, loss_rec, loss_sep, LatentMap, ModelSampleBatch, SimilarityConfig, Standardizer,
};
use smc::weights::{percentile, weights_from_densities};
use smc::Prediction;

fn map(seed: u64) -> LatentMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LatentMap::init(Standardizer::identity(2), 2, &[5], &mut rng).unwrap()
}

fn batch(rows: &[(f64, f64, usize)]) -> ModelSampleBatch {
    let points = Matrix::from_rows(&rows.iter().map(|r| [r.0, r.1]).collect::<Vec<_>>()).unwrap();
    let predictions = rows
        .iter()
        .map(|r| vec![Prediction::Regression(r.0.sin()), Prediction::Regression(r.1 * 0.5)])
        .collect();
    ModelSampleBatch::new(points, rows.iter().map(|r| r.2).collect(), predictions).unwrap()
}

fn sample_rows() -> impl Strategy<Value = Vec<(f64, f64, usize)>> {
    prop::collection::vec((-3.0..3.0f64, -3.0..3.0f64, 0..2usize), 2..8)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn weights_stay_on_simplex(p in prop::collection::vec(0.0..1e6f64, 1..10), exp in -15.0..2.0f64) {
        let wv = weights_from_densities(&p, 10f64.powf(exp)).unwrap();
        prop_assert!((wv.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(wv.weights.iter().all(|w| *w >= 0.0));
        prop_assert!((wv.confidence - p.iter().sum::<f64>()).abs() <= 1e-12 * wv.confidence.max(1.0));
    }

    #[test]
    fn combined_probabilities_stay_normalised(
        raw in prop::collection::vec(prop::collection::vec(0.01..1.0f64, 3), 1..6),
        w in prop::collection::vec(0.0..1.0f64, 6),
    ) {
        let preds: Vec<Prediction> = raw
            .iter()
            .map(|r| {
                let s: f64 = r.iter().sum();
                Prediction::Probabilities(r.iter().map(|v| v / s).collect())
            })
            .collect();
        let w = &w[..preds.len()];
        let total: f64 = w.iter().sum::<f64>() + 1e-9;
        let w: Vec<f64> = w.iter().map(|v| (v + 1e-9 / w.len() as f64) / total).collect();
        let out = combine(&preds, &w).unwrap();
        let p = out.as_probabilities().unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn loss_signs(rows in sample_rows(), seed in 0..20u64) {
        let m = map(seed);
        let b = batch(&rows);
        prop_assert!(loss_rec(&m, &b.points, 0.01).unwrap().0 >= 0.0);
        prop_assert!(loss_con(&m, &b, &SimilarityConfig::default()).unwrap().0 >= 0.0);
        prop_assert!(loss_sep(&m, &b).unwrap().0 <= 0.0);
    }

    #[test]
    fn pair_losses_ignore_row_order(rows in sample_rows(), seed in 0..20u64) {
        let m = map(seed);
        let mut reversed = rows.clone();
        reversed.reverse();
        let (a, b) = (batch(&rows), batch(&reversed));
        let cfg = SimilarityConfig { regression_scale: Some(1.0) };
        let (ca, cb) = (loss_con(&m, &a, &cfg).unwrap().0, loss_con(&m, &b, &cfg).unwrap().0);
        let (sa, sb) = (loss_sep(&m, &a).unwrap().0, loss_sep(&m, &b).unwrap().0);
        prop_assert!((ca - cb).abs() <= 1e-9 * ca.abs().max(1.0));
        prop_assert!((sa - sb).abs() <= 1e-9 * sa.abs().max(1.0));
    }

    #[test]
    fn pair_losses_are_quadratic_in_latent_scale(rows in sample_rows(), seed in 0..20u64) {
        let m = map(seed);
        let mut doubled = m.clone();
        let last = doubled.encoder().num_layers() - 1;
        let (w, bias) = doubled.encoder_mut().layer_mut(last);
        w.iter_mut().for_each(|v| *v *= 2.0);
        bias.iter_mut().for_each(|v| *v *= 2.0);
        let b = batch(&rows);
        let cfg = SimilarityConfig { regression_scale: Some(1.0) };
        let (c1, c2) = (loss_con(&m, &b, &cfg).unwrap().0, loss_con(&doubled, &b, &cfg).unwrap().0);
        let (s1, s2) = (loss_sep(&m, &b).unwrap().0, loss_sep(&doubled, &b).unwrap().0);
        prop_assert!((c2 - 4.0 * c1).abs() <= 1e-9 * c2.abs().max(1.0));
        prop_assert!((s2 - 4.0 * s1).abs() <= 1e-9 * s2.abs().max(1.0));
    }

    #[test]
    fn bic_weights_are_shift_invariant(bics in prop::collection::vec(-1e4..1e4f64, 1..8), shift in -1e3..1e3f64) {
        let a = bic_weights(&bics).unwrap();
        let shifted: Vec<f64> = bics.iter().map(|b| b + shift).collect();
        let b = bic_weights(&shifted).unwrap();
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn percentile_is_bracketed(v in prop::collection::vec(-1e3..1e3f64, 1..50), q in 0.0..100.0f64) {
        let p = percentile(&v, q).unwrap();
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(p >= lo && p <= hi);
    }

    #[test]
    fn subsampling_is_idempotent(
        rows in prop::collection::vec((0.0..100.0f64, 0..3usize), 1..60),
    ) {
        let table = DemographicsTable::from_json(
            r#"{"covariates":["age"],"models":[
                {"id":"a","covariates":{"age":{"mean":20,"std":8}}},
                {"id":"b","covariates":{"age":{"mean":50,"std":15}}},
                {"id":"c","covariates":{"age":{"mean":80,"std":5}}}]}"#,
        )
        .unwrap();
        let densities = build_cohort_densities(&table).unwrap();
        let x = Matrix::from_rows(&rows.iter().map(|r| [r.0]).collect::<Vec<_>>()).unwrap();
        let cohort = PooledCohort::new(Dataset::new(x, None).unwrap(), rows.iter().map(|r| r.1).collect()).unwrap();
        let once = rejection_subsample(&cohort, &densities).unwrap();
        let twice = rejection_subsample(&once, &densities).unwrap();
        prop_assert_eq!(&once, &twice);
        prop_assert!(once.len() <= cohort.len());
    }
}
