mod support;

use std::collections::BTreeMap;

use glassrl::dataset::{bundled_mini_dataset, ClassLabel, ElementDescriptorTable, Property};
use glassrl::guidance::metrics::{auc, mape, r2, rmse};
use glassrl::guidance::{
    cross_validate_regressor, mean_defined, BudgetedGuidance, ClassifierModel, ClassifierSpec, EdRvfl, ForestParams,
    Guidance, GuidanceBundle, GuidanceConfig, RandomForest, RegressionMetrics, RvflParams,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::*;

#[test]
fn edrvfl_fits_a_linear_target() {
    let (x, y) = linear_data(400, 1);
    let col: Vec<Option<f64>> = y.iter().map(|&v| Some(v)).collect();
    let params = RvflParams {
        layers: 4,
        hidden: 32,
        lambda: 1e-3,
        ..RvflParams::default()
    };
    let m = EdRvfl::fit(&x[..300], &[col[..300].to_vec()], &params, 3).unwrap();
    let pred: Vec<f64> = m.predict(&x[300..]).unwrap().into_iter().map(|r| r[0]).collect();
    let score = r2(&y[300..], &pred).unwrap().unwrap();
    assert!(score >= 0.99, "held-out R² {score}");
}

#[test]
fn single_empty_layer_is_ridge() {
    let (x, y) = linear_data(60, 2);
    let col: Vec<Option<f64>> = y.iter().map(|&v| Some(v)).collect();
    let params = RvflParams {
        layers: 1,
        hidden: 0,
        lambda: 2.5,
        ..RvflParams::default()
    };
    let m = EdRvfl::fit(&x, &[col], &params, 0).unwrap();
    let (q, _) = linear_data(25, 9);
    let got: Vec<f64> = m.predict(&q).unwrap().into_iter().map(|r| r[0]).collect();
    let want = ridge_oracle(&x, &y, 2.5, &q);
    for (g, w) in got.iter().zip(&want) {
        assert!((g - w).abs() <= 1e-8 * w.abs().max(1.0), "{g} vs {w}");
    }
}

#[test]
fn classifier_separates_blobs_and_not_noise() {
    let params = ForestParams {
        n_trees: 60,
        ..ForestParams::default()
    };
    let (x, y) = blobs(400, 3.0, 1);
    let (xt, yt) = blobs(400, 3.0, 2);
    let f = RandomForest::fit(&x, &y, &params, 5).unwrap();
    let s: Vec<f64> = xt.iter().map(|r| f.predict_proba(r)).collect();
    assert!(auc(&s, &yt).unwrap().unwrap() >= 0.99);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let shuffled: Vec<bool> = y.iter().map(|_| rng.gen_bool(0.5)).collect();
    let test_labels: Vec<bool> = (0..2000).map(|_| rng.gen_bool(0.5)).collect();
    let (xt, _) = blobs(2000, 3.0, 3);
    let f = RandomForest::fit(&x, &shuffled, &params, 5).unwrap();
    let s: Vec<f64> = xt.iter().map(|r| f.predict_proba(r)).collect();
    let a = auc(&s, &test_labels).unwrap().unwrap();
    assert!((a - 0.5).abs() <= 0.05, "AUC on noise {a}");
}

fn small_config() -> GuidanceConfig {
    GuidanceConfig {
        classifier: ClassifierSpec {
            forest: ForestParams {
                n_trees: 40,
                ..ForestParams::default()
            },
            ..ClassifierSpec::default()
        },
        regressor: RvflParams {
            layers: 3,
            hidden: 32,
            ..RvflParams::default()
        },
        classifier_folds: 0,
        regressor_folds: 0,
        seed: 11,
    }
}

#[test]
fn mini_dataset_guidance_in_sample_checks() {
    let d = bundled_mini_dataset();
    let table = ElementDescriptorTable::bundled();
    let bundle = GuidanceBundle::train(&d, &table, &small_config()).unwrap();

    let bmg: Vec<_> = d.compositions_with_label(ClassLabel::Bmg);
    let hits = bmg
        .iter()
        .filter(|c| bundle.predict_class_prob(c).unwrap() >= 0.5)
        .count();
    assert!(hits as f64 >= 0.9 * bmg.len() as f64, "{hits}/{}", bmg.len());

    let (y, y_hat): (Vec<f64>, Vec<f64>) = d
        .regression
        .iter()
        .filter_map(|r| {
            r.properties.get(Property::SigmaY).map(|v| {
                (
                    v,
                    bundle
                        .predict_properties(&r.composition)
                        .unwrap()
                        .get(Property::SigmaY)
                        .unwrap(),
                )
            })
        })
        .unzip();
    assert!(r2(&y, &y_hat).unwrap().unwrap() > 0.0);

    let c = &d.regression[0].composition;
    assert_eq!(bundle.predict(c).unwrap(), bundle.predict(&c.clone()).unwrap());
}

#[test]
fn training_ignores_row_order() {
    let d = bundled_mini_dataset();
    let table = ElementDescriptorTable::bundled();
    let cfg = small_config();
    let mut rev = d.clone();
    rev.regression.reverse();
    rev.classification.reverse();
    let a = GuidanceBundle::train(&d, &table, &cfg).unwrap();
    let b = GuidanceBundle::train(&rev, &table, &cfg).unwrap();
    for r in d.regression.iter().take(20) {
        assert_eq!(a.predict(&r.composition).unwrap(), b.predict(&r.composition).unwrap());
    }
    let spec = ClassifierSpec::default();
    let m1 = ClassifierModel::train(&d.classification, &spec, &table, 1).unwrap();
    let m2 = ClassifierModel::train(&rev.classification, &spec, &table, 1).unwrap();
    assert_eq!(m1, m2);
}

#[test]
fn checkpoint_round_trips_exactly() {
    let d = bundled_mini_dataset();
    let table = ElementDescriptorTable::bundled();
    let bundle = GuidanceBundle::train(&d, &table, &small_config()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bundle.json");
    bundle.save(&path).unwrap();
    let back = GuidanceBundle::load(&path).unwrap();
    assert_eq!(bundle, back);
    let c = &d.classification[3].composition;
    assert_eq!(bundle.predict(c).unwrap(), back.predict(c).unwrap());
}

#[test]
fn cv_report_matches_out_of_fold_recomputation() {
    let d = bundled_mini_dataset();
    let table = ElementDescriptorTable::bundled();
    let params = RvflParams {
        layers: 2,
        hidden: 16,
        ..RvflParams::default()
    };
    let report = cross_validate_regressor(&d.regression, &[], &params, &table, 5, 4).unwrap();
    let again = cross_validate_regressor(&d.regression, &[], &params, &table, 5, 4).unwrap();
    assert_eq!(report, again);

    for p in Property::ALL {
        let mut per_fold: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for (i, row) in d.regression.iter().enumerate() {
            if let Some(v) = row.properties.get(p) {
                let e = per_fold.entry(report.fold_of[i]).or_default();
                e.0.push(v);
                e.1.push(report.oof_properties[i][p.index()]);
            }
        }
        let folds: Vec<RegressionMetrics> = per_fold
            .values()
            .map(|(y, yh)| RegressionMetrics {
                rmse: Some(rmse(y, yh).unwrap()),
                r2: r2(y, yh).unwrap(),
                mape: mape(y, yh).unwrap(),
                n: y.len(),
            })
            .collect();
        let got = report.regression[&p];
        let want_r2 = mean_defined(folds.iter().map(|m| m.r2));
        let want_rmse = mean_defined(folds.iter().map(|m| m.rmse));
        assert!((got.r2.unwrap() - want_r2.unwrap()).abs() <= 1e-12);
        assert!((got.rmse.unwrap() - want_rmse.unwrap()).abs() <= 1e-12);
    }
}

#[test]
fn budget_is_enforced_and_counted() {
    let d = bundled_mini_dataset();
    let table = ElementDescriptorTable::bundled();
    let bundle = GuidanceBundle::train(&d, &table, &small_config()).unwrap();
    let g = BudgetedGuidance::new(bundle, 5);
    let c = &d.classification[0].composition;
    for _ in 0..5 {
        g.predict(c).unwrap();
    }
    assert!(g.predict(c).is_err());
    assert_eq!(g.used(), 5);
}
