use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use scoretpp_core::data::{Event, EventSequence, NormalizedSequence};
use scoretpp_core::hawkes::{self, HawkesParams, NextEventDistribution};
use scoretpp_core::metrics::{self, QuantileGrid, SamplePack};
use scoretpp_core::sampling::{self, SampleRecord};
use scoretpp_core::training;
use scoretpp_core::{Checkpoint, Model, RunConfig};
use std::io::Cursor;

fn two_type_params() -> HawkesParams {
    HawkesParams {
        mu: vec![0.4, 0.3],
        alpha: vec![vec![0.3, 0.2], vec![0.1, 0.4]],
        beta: vec![vec![1.0, 2.0], vec![1.5, 1.0]],
    }
}

fn history(times: &[f64], types: &[usize]) -> Vec<Event> {
    times.iter().zip(types).map(|(&t, &k)| Event { t, k }).collect()
}

/// `1 − exp(−∫₀ᵍ λ)` by the midpoint rule on the summed intensity.
fn integrated_cdf(dist: &NextEventDistribution, gap: f64) -> f64 {
    let n = 20_000;
    let h = gap / n as f64;
    let mass: f64 = (0..n).map(|i| dist.intensity((i as f64 + 0.5) * h)).sum::<f64>() * h;
    1.0 - (-mass).exp()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn next_event_cdf_matches_integrated_intensity(
        steps in prop::collection::vec((0.05f64..2.0, 0usize..2), 1..6),
        gap in 0.01f64..6.0,
    ) {
        let mut t = 0.0;
        let (mut times, mut types) = (Vec::new(), Vec::new());
        for (dt, k) in steps {
            t += dt;
            times.push(t);
            types.push(k);
        }
        let dist = NextEventDistribution::new(&two_type_params(), &history(&times, &types)).unwrap();
        let closed = dist.cdf(gap);
        prop_assert!((closed - integrated_cdf(&dist, gap)).abs() < 1e-6);
        if closed > 1e-6 && closed < 1.0 - 1e-6 {
            prop_assert!((dist.quantile(closed).unwrap() - gap).abs() < 1e-6);
        }
    }
}

#[test]
fn mirror_chains_on_the_exact_score_match_the_next_event_law() {
    let params = HawkesParams::univariate(1.0, 0.5, 2.0);
    let dist = NextEventDistribution::new(&params, &history(&[0.3, 0.9, 1.0], &[0, 0, 0])).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let draws: Vec<f64> = (0..2000)
        .map(|_| {
            let x0 = rng.gen_range(0.05..6.0);
            let mut noise = || rng.sample::<f64, _>(StandardNormal);
            sampling::mirror_langevin_chain(&dist, x0, 1e-2, 3000, true, &mut noise).unwrap()
        })
        .collect();
    for q in [0.25, 0.5, 0.75] {
        let x = dist.quantile(q).unwrap();
        let below = draws.iter().filter(|&&d| d <= x).count() as f64 / draws.len() as f64;
        assert!((below - q).abs() < 0.04, "q={q}: empirical {below}");
    }
}

#[test]
fn oracle_samples_are_calibrated_on_their_own_process() {
    let params = two_type_params();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let dataset = hawkes::simulate_dataset(&params, 30.0, 60, &mut rng).unwrap();
    let records = sampling::hawkes_oracle_records(&params, &dataset, 200, 6).unwrap();
    assert_eq!(records.len(), dataset.sequences.iter().map(|s| s.len().saturating_sub(1)).sum::<usize>());
    let gaps: Vec<f64> = records.iter().map(|r| r.time).collect();
    let types: Vec<usize> = records.iter().map(|r| r.event_type).collect();
    let packs: Vec<SamplePack> = records.iter().map(SampleRecord::pack).collect();
    let report = metrics::evaluate(&gaps, &types, &packs, &QuantileGrid::default()).unwrap();
    assert!(report.cs < 5.0, "CS {}", report.cs);
    assert!(report.crps > 0.0);

    let parsed = sampling::parse_records(&sampling::records_to_jsonl(&records)).unwrap();
    assert_eq!(parsed, records);
}

fn small_corpus() -> Vec<NormalizedSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let dataset = hawkes::simulate_dataset(&two_type_params(), 15.0, 12, &mut rng).unwrap();
    let normalizer = scoretpp_core::Normalizer::identity();
    dataset
        .sequences
        .iter()
        .filter(|s| s.len() >= 2)
        .map(|s: &EventSequence| normalizer.apply(s).unwrap())
        .collect()
}

#[test]
fn training_is_deterministic_and_survives_a_checkpoint() {
    let mut cfg = RunConfig::profile("synthetic").unwrap();
    cfg.set("seed", "3").unwrap();
    cfg.set("train.epochs", "2").unwrap();
    cfg.set("train.perturbations", "4").unwrap();
    cfg.num_types = 2;
    let corpus = small_corpus();
    let run = || {
        let model = Model::init(cfg.model_config(2), cfg.seed).unwrap();
        training::train(model, &cfg.train, &corpus, &[], |_, _| Ok(())).unwrap()
    };
    let first = run();
    assert_eq!(first.epoch, 2);
    assert_eq!(first.model.params(), run().model.params());

    let ckpt = Checkpoint {
        config: cfg.clone(),
        normalizer: scoretpp_core::Normalizer::identity(),
        epoch: first.epoch,
        model: first.model.clone(),
        adam: first.adam.clone(),
    };
    let mut bytes = Vec::new();
    ckpt.write_to(&mut bytes).unwrap();
    let loaded = Checkpoint::read_from(&mut Cursor::new(bytes)).unwrap();
    assert_eq!(loaded.epoch, 2);
    assert_eq!(loaded.config.to_text(), cfg.to_text());
    for seq in &corpus {
        let before = first.model.event_heads(seq).unwrap();
        let after = loaded.model.event_heads(seq).unwrap();
        assert_eq!(before, after);
    }
}
