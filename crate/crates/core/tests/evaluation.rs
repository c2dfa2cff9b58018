use std::collections::{BTreeMap, BTreeSet};

use glassrl::dataset::{element_index, Composition, Property, PropertyVector, Target, ThresholdSet};
use glassrl::environment::{Environment, ExplorationBase};
use glassrl::evaluation::{
    choose_resolution, grid_baseline, mean_episode_reward, random_baseline, render_table, render_tsv, success_rates,
    BudgetedSearchConfig, Lattice, Rate,
};
use glassrl::guidance::{BudgetedGuidance, Guidance, Prediction};
use glassrl::reward::{CompositionDatabase, RewardBreakdown, RewardConfig, RewardEngine};
use glassrl::trainer::StepRecord;
use proptest::prelude::*;

/// Cheap stand-in: glassy when copper is between 20 and 50 at.%, D_max grows
/// with copper.
struct Toy;

impl Guidance for Toy {
    fn version(&self) -> u64 {
        1
    }

    fn predict(&self, c: &Composition) -> glassrl::Result<Prediction> {
        let cu = c.fractions()[el("Cu")];
        let mut properties = PropertyVector::default();
        properties.set(Property::Dmax, Some(cu / 10.0));
        Ok(Prediction {
            class_prob: if (20.0..=50.0).contains(&cu) { 0.9 } else { 0.2 },
            properties,
        })
    }
}

fn el(s: &str) -> usize {
    element_index(s).unwrap()
}

fn dmax() -> Target {
    Target::Property(Property::Dmax)
}

fn thresholds() -> ThresholdSet {
    ThresholdSet::uniform([(dmax(), 3.0)].into()).unwrap()
}

fn engine() -> RewardEngine {
    RewardEngine::new(RewardConfig::new(thresholds()), CompositionDatabase::new(vec![])).unwrap()
}

fn zr_cu_al() -> ExplorationBase {
    ExplorationBase::new(
        el("Zr"),
        vec![
            (el("Zr"), (40.0, 70.0)),
            (el("Cu"), (10.0, 45.0)),
            (el("Al"), (0.0, 15.0)),
        ],
        10,
    )
    .unwrap()
}

fn record(episode: u64, legal: bool, cls: Option<f64>, d: Option<f64>, done: bool) -> StepRecord {
    let predicted = d.map(|v| {
        let mut p = PropertyVector::default();
        p.set(Property::Dmax, Some(v));
        p
    });
    StepRecord {
        episode,
        k: 1,
        t: 0,
        base: "Zr".into(),
        bundle_version: 1,
        s: vec![0.0; 52],
        a: vec![0.0; 52],
        s_next: legal.then(|| vec![0.0; 52]),
        reward: RewardBreakdown {
            legal,
            cls_prob: cls,
            predicted,
            done,
            ..Default::default()
        },
        terminal: false,
    }
}

#[derive(Debug, Clone)]
struct Step {
    episode: u64,
    legal: bool,
    cls: f64,
    d: f64,
    done: bool,
}

fn step() -> impl Strategy<Value = Step> {
    (
        0u64..6,
        any::<bool>(),
        0.0..1.0f64,
        0.0..6.0f64,
        prop::bool::weighted(0.1),
    )
        .prop_map(|(episode, legal, cls, d, done)| Step {
            episode,
            legal,
            cls,
            d,
            done,
        })
}

fn to_records(steps: &[Step]) -> Vec<StepRecord> {
    steps
        .iter()
        .map(|s| {
            if s.legal {
                record(s.episode, true, Some(s.cls), (s.cls > 0.5).then_some(s.d), s.done)
            } else {
                record(s.episode, false, None, None, false)
            }
        })
        .collect()
}

proptest! {
    #[test]
    fn rates_match_direct_counts(steps in prop::collection::vec(step(), 1..200)) {
        let sr = success_rates(&to_records(&steps), &thresholds()).unwrap();
        let legal = steps.iter().filter(|s| s.legal).count() as u64;
        let cls = steps.iter().filter(|s| s.legal && s.cls > 0.5).count() as u64;
        let hit = steps.iter().filter(|s| s.legal && s.cls > 0.5 && s.d >= 3.0).count() as u64;
        let eps: BTreeSet<u64> = steps.iter().map(|s| s.episode).collect();
        let won: BTreeSet<u64> = steps.iter().filter(|s| s.legal && s.done).map(|s| s.episode).collect();
        prop_assert_eq!(sr.legal, Rate::new(legal, steps.len() as u64));
        prop_assert_eq!(sr.cls, Rate::new(cls, legal));
        prop_assert_eq!(sr.sr80[&dmax()], Rate::new(hit, cls));
        prop_assert_eq!(sr.done, Rate::new(won.len() as u64, eps.len() as u64));
        for r in [sr.legal, sr.cls, sr.done, sr.sr80[&dmax()]] {
            prop_assert!(r.count <= r.denominator);
            if let Some(p) = r.percent {
                prop_assert!((0.0..=100.0).contains(&p));
            }
        }
    }

    #[test]
    fn making_a_step_legal_never_lowers_legality(steps in prop::collection::vec(step(), 1..100), i in any::<prop::sample::Index>()) {
        let mut steps = steps;
        let i = i.index(steps.len());
        steps[i].legal = false;
        let before = success_rates(&to_records(&steps), &thresholds()).unwrap();
        steps[i].legal = true;
        let after = success_rates(&to_records(&steps), &thresholds()).unwrap();
        prop_assert_eq!(after.legal.count, before.legal.count + 1);
        prop_assert!(after.legal.percent.unwrap() > before.legal.percent.unwrap());
    }
}

#[test]
fn rates_on_degenerate_logs() {
    assert!(success_rates(&[], &thresholds()).is_err());
    let all_illegal = vec![record(0, false, None, None, false); 4];
    let sr = success_rates(&all_illegal, &thresholds()).unwrap();
    assert_eq!(sr.legal.percent, Some(0.0));
    assert_eq!(sr.cls.percent, None);
    assert_eq!(sr.sr80[&dmax()].percent, None);
    let all_legal = vec![record(0, true, Some(0.9), Some(4.0), false); 3];
    let sr = success_rates(&all_legal, &thresholds()).unwrap();
    assert_eq!(sr.legal.percent, Some(100.0));
    assert_eq!(sr.cls.percent, Some(100.0));
    assert_eq!(sr.sr80[&dmax()].percent, Some(100.0));
    assert_eq!(sr.done.percent, Some(0.0));
}

#[test]
fn episode_mean_reward_averages_episode_means() {
    let mut recs = Vec::new();
    for (ep, rewards) in [(0u64, vec![1.0, 0.0, 0.0, 0.0]), (1, vec![-1.0])] {
        for r in rewards {
            let mut rec = record(ep, true, Some(0.9), None, false);
            rec.reward.total = r;
            recs.push(rec);
        }
    }
    assert!((mean_episode_reward(&recs).unwrap() - (0.25 - 1.0) / 2.0).abs() < 1e-12);
    assert_eq!(mean_episode_reward(&[]), None);
}

#[test]
fn random_baseline_spends_exactly_its_budget() {
    let env = Environment {
        delta_max: 5.0,
        t_ep: 16,
    };
    let bases = vec![zr_cu_al()];
    let run = |budget: u64, seed: u64| {
        let g = BudgetedGuidance::new(Toy, budget);
        let cfg = BudgetedSearchConfig {
            budget,
            t_ep: 16,
            seed,
            grid_resolution: None,
        };
        let recs = random_baseline(&cfg, &env, &bases, &engine(), &g).unwrap();
        (recs, g.used())
    };
    let (empty, used) = run(0, 0);
    assert!(empty.is_empty());
    assert_eq!(used, 0);
    for budget in [1, 7, 300] {
        let (recs, used) = run(budget, 3);
        assert_eq!(used, budget);
        assert!(!recs.is_empty());
        assert!(recs.iter().all(|r| r.k <= 16));
        let legal = recs.iter().filter(|r| r.reward.legal).count() as u64;
        assert!(legal <= budget);
    }
    assert_eq!(run(300, 3).0, run(300, 3).0);
    assert_ne!(run(300, 3).0, run(300, 4).0);
}

#[test]
fn two_element_lattice_is_a_segment() {
    for (lo, hi, r) in [
        (40.0, 70.0, 1.0),
        (40.0, 70.0, 2.5),
        (55.0, 60.0, 0.5),
        (0.0, 100.0, 10.0),
    ] {
        let base = ExplorationBase::new(
            el("Cu"),
            vec![(el("Cu"), (100.0 - hi, 100.0 - lo)), (el("Zr"), (lo, hi))],
            1,
        )
        .unwrap();
        let l = Lattice::new(&base, r).unwrap();
        let want = ((hi - lo) / r).floor() + 1.0;
        assert_eq!(l.count(), want, "{lo}..{hi} at {r}");
        assert_eq!(l.points(usize::MAX).unwrap().len() as f64, want);
    }
}

#[test]
fn lattice_count_matches_brute_force() {
    let base = zr_cu_al();
    for r in [1.0, 2.5, 5.0] {
        let l = Lattice::new(&base, r).unwrap();
        let mut brute = 0usize;
        let steps = |lo: f64, hi: f64| ((lo / r).ceil() as i64..=(hi / r).floor() as i64).map(move |u| u as f64 * r);
        for cu in steps(10.0, 45.0) {
            for al in steps(0.0, 15.0) {
                let zr = 100.0 - cu - al;
                if (40.0 - 1e-9..=70.0 + 1e-9).contains(&zr) {
                    brute += 1;
                }
            }
        }
        assert_eq!(l.count(), brute as f64, "resolution {r}");
        let pts = l.points(usize::MAX).unwrap();
        assert_eq!(pts.len(), brute);
        let mut seen = BTreeSet::new();
        for p in &pts {
            let f = p.fractions();
            assert!((f.iter().sum::<f64>() - 100.0).abs() < 1e-9);
            for (i, lo, hi) in base.ranges() {
                assert!(f[i] >= lo - 1e-9 && f[i] <= hi + 1e-9);
            }
            for &i in &[el("Cu"), el("Al")] {
                assert!(((f[i] / r) - (f[i] / r).round()).abs() < 1e-9);
            }
            let key: Vec<i64> = f.iter().map(|v| (v * 1e6).round() as i64).collect();
            assert!(seen.insert(key));
        }
        let head = l.points(10).unwrap();
        assert_eq!(head[..], pts[..10]);
        assert_eq!(l.points(10).unwrap(), head);
    }
    assert!(Lattice::new(&base, 0.0).is_err());
}

#[test]
fn resolution_fits_the_per_base_budget() {
    let base = zr_cu_al();
    for target in [5u64, 50, 500, 5000] {
        let l = choose_resolution(&base, target).unwrap();
        assert!(l.count() <= target as f64, "{} points at {}", l.count(), l.resolution);
    }
    let fine = choose_resolution(&base, 1_000_000).unwrap();
    assert_eq!(fine.resolution, 0.1);
}

#[test]
fn grid_baseline_walks_the_lattice_within_budget() {
    let bases = vec![zr_cu_al()];
    let g = BudgetedGuidance::new(Toy, 100);
    let cfg = BudgetedSearchConfig {
        budget: 100,
        t_ep: 8,
        seed: 0,
        grid_resolution: Some(1.0),
    };
    let recs = grid_baseline(&cfg, &bases, &engine(), &g).unwrap();
    assert_eq!(recs.len(), 100);
    assert_eq!(g.used(), 100);
    let pts = Lattice::new(&bases[0], 1.0).unwrap().points(100).unwrap();
    for (r, p) in recs.iter().zip(&pts) {
        assert!(r.reward.legal);
        assert_eq!(r.s_next.as_deref(), Some(p.fractions()));
    }
    let episodes: BTreeMap<u64, usize> = recs.iter().fold(BTreeMap::new(), |mut m, r| {
        *m.entry(r.episode).or_default() += 1;
        m
    });
    assert!(episodes.values().all(|&n| n <= 8));
    let sr = success_rates(&recs, &thresholds()).unwrap();
    assert_eq!(sr.legal.percent, Some(100.0));
}

#[test]
fn tables_carry_every_column() {
    let recs = vec![
        record(0, true, Some(0.9), Some(4.0), true),
        record(0, false, None, None, false),
    ];
    let sr = success_rates(&recs, &thresholds()).unwrap();
    let rows = vec![("Random".to_string(), sr)];
    let table = render_table(&rows);
    for label in ["Dmax", "Tg/Tl", "sigma_Y", "E", "epsilon", "Random", "50.00", "100.00"] {
        assert!(table.contains(label), "{label} missing from\n{table}");
    }
    let tsv = render_tsv(&rows);
    assert_eq!(tsv.lines().count(), 2);
    assert!(tsv
        .lines()
        .all(|l| l.split('\t').count() == tsv.lines().next().unwrap().split('\t').count()));
}
