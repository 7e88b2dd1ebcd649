mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use seqplace::evaluation::GeoIndex;
use seqplace::features::{generate_world, Split, SyntheticDataset, SyntheticWorldConfig};
use seqplace::heads::init_seqvlad;
use seqplace::training::{
    hard_negatives, mine_triplet, nearest_positive, train, Mined, NegativeCache, SkipReason, TrainConfig, TrainData,
};
use seqplace::{Head, Sequence};

fn world(noise: bool) -> SyntheticDataset {
    let mut cfg = SyntheticWorldConfig {
        n_landmarks: 150,
        landmark_dim: 16,
        route_length_m: 800.0,
        grid_h: 2,
        grid_w: 2,
        ..SyntheticWorldConfig::default()
    };
    if !noise {
        cfg.noise_sigma = 0.0;
        cfg.domain_shift_sigma = 0.0;
    }
    generate_world(&cfg).unwrap()
}

fn head_for(ds: &SyntheticDataset, k: usize) -> Head {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    Head::SeqVlad(init_seqvlad(&ds.split(Split::Train).database.sequences, k, 100.0, &mut rng).unwrap())
}

fn data(ds: &SyntheticDataset) -> TrainData<'_> {
    let (tr, va) = (ds.split(Split::Train), ds.split(Split::Val));
    TrainData {
        train_database: &tr.database.sequences,
        train_queries: &tr.queries.sequences,
        val_database: &va.database.sequences,
        val_queries: &va.queries.sequences,
    }
}

fn geo(db: &[Sequence]) -> GeoIndex {
    GeoIndex::new(db.iter().map(|s| s.geotags()).collect(), 25.0)
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

#[test]
fn hard_negatives_match_exhaustive_cache_scan() {
    let ds = world(true);
    let head = head_for(&ds, 8);
    let tr = ds.split(Split::Train);
    let db = &tr.database.sequences;
    let g = geo(db);
    let mut cache = NegativeCache::new();
    cache.refresh(&head, db, 60, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(cache.len(), 60);
    for q in tr.queries.sequences.iter().step_by(3) {
        let qd = head.describe(q).unwrap();
        let mut far: Vec<(f64, &str, usize)> = cache
            .entries()
            .iter()
            .filter(|(i, _)| !common::brute_force_match(&q.geotags(), &db[*i].geotags(), 25.0))
            .map(|(i, d)| (sq(qd.values(), d.values()), db[*i].seq_id(), *i))
            .collect();
        far.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(b.1)));
        let want: Vec<usize> = far.iter().take(5).map(|t| t.2).collect();
        assert_eq!(hard_negatives(q, qd.values(), db, &cache, &g, 5), want);
    }
}

#[test]
fn positive_is_the_geographically_nearest_match() {
    let ds = world(true);
    let tr = ds.split(Split::Train);
    let db = &tr.database.sequences;
    let g = geo(db);
    let mean = |s: &Sequence| {
        let t = s.geotags();
        let n = t.len() as f64;
        (t.iter().map(|p| p.easting).sum::<f64>() / n, t.iter().map(|p| p.northing).sum::<f64>() / n)
    };
    for q in &tr.queries.sequences {
        let (qe, qn) = mean(q);
        let want = db
            .iter()
            .enumerate()
            .filter(|(_, d)| common::brute_force_match(&q.geotags(), &d.geotags(), 25.0))
            .map(|(i, d)| {
                let (e, n) = mean(d);
                ((e - qe).hypot(n - qn), d.seq_id(), i)
            })
            .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(b.1)))
            .map(|t| t.2);
        assert_eq!(nearest_positive(q, db, &g), want);
    }
}

#[test]
fn forced_and_impossible_negative_selection() {
    let ds = world(true);
    let head = head_for(&ds, 4);
    let tr = ds.split(Split::Train);
    let db = &tr.database.sequences;
    let g = geo(db);
    let q = &tr.queries.sequences[20];
    let qd = head.describe(q).unwrap();
    let positives = g.positives(&q.geotags());
    let far: Vec<usize> = (0..db.len()).filter(|i| !positives.contains(i)).step_by(17).take(5).collect();
    let desc = |i: usize| (i, head.describe(&db[i]).unwrap());

    let mut entries: Vec<_> = positives.iter().map(|&i| desc(i)).collect();
    entries.extend(far.iter().map(|&i| desc(i)));
    let cache = NegativeCache::from_entries(entries);
    let mut got = hard_negatives(q, qd.values(), db, &cache, &g, 5);
    got.sort_unstable();
    assert_eq!(got, far);

    let only_pos = NegativeCache::from_entries(positives.iter().map(|&i| desc(i)).collect());
    assert_eq!(
        mine_triplet(q, qd.values(), db, &only_pos, &g, 5),
        Mined::Skipped(SkipReason::TooFewNegatives { found: 0 })
    );
}

#[test]
fn zero_learning_rate_leaves_parameters_bit_identical() {
    let ds = world(true);
    let head = head_for(&ds, 4);
    let cfg = TrainConfig { lr: 0.0, max_epochs: 1, ..TrainConfig::default() };
    let out = train(head.clone(), data(&ds), &cfg).unwrap();
    assert!(out.log.rows[1].optimizer_steps > 0);
    let before: Vec<u64> = head.parameters().iter().flat_map(|p| p.iter().map(|v| v.to_bits())).collect();
    let after: Vec<u64> = out.last_head.parameters().iter().flat_map(|p| p.iter().map(|v| v.to_bits())).collect();
    assert_eq!(before, after);
}

#[test]
fn same_seed_same_training_run() {
    let ds = world(true);
    let cfg = TrainConfig { lr: 1e-3, max_epochs: 2, ..TrainConfig::default() };
    let a = train(head_for(&ds, 4), data(&ds), &cfg).unwrap();
    let b = train(head_for(&ds, 4), data(&ds), &cfg).unwrap();
    assert_eq!(a.log.without_timing(), b.log.without_timing());
    assert_eq!(a.last_head, b.last_head);
    let c = train(head_for(&ds, 4), data(&ds), &TrainConfig { seed: 9, ..cfg }).unwrap();
    assert_ne!(a.last_head, c.last_head);
}

#[test]
fn noiseless_world_reaches_full_recall_at_5_within_three_epochs() {
    let ds = world(false);
    let cfg = TrainConfig { lr: 1e-3, max_epochs: 3, ..TrainConfig::default() };
    let out = train(head_for(&ds, 8), data(&ds), &cfg).unwrap();
    assert!(out.log.rows.iter().any(|r| r.val_r5 == 1.0), "{:?}", out.log.rows);
    assert_eq!(out.log.rows.iter().map(|r| r.val_r5).fold(0.0, f64::max), out.log.rows[out.best_epoch].val_r5);
}

#[test]
fn noiseless_loss_is_non_increasing_up_to_one_violation() {
    let ds = world(false);
    let cfg = TrainConfig { lr: 1e-3, max_epochs: 10, patience: 10, ..TrainConfig::default() };
    let out = train(head_for(&ds, 8), data(&ds), &cfg).unwrap();
    let loss: Vec<f64> = out.log.rows[1..].iter().map(|r| r.loss_mean).collect();
    let violations = loss.windows(2).filter(|w| w[1] > w[0]).count();
    assert!(violations <= 1, "loss per epoch {loss:?}");
}

#[test]
fn log_csv_round_trips() {
    let ds = world(true);
    let out = train(head_for(&ds, 4), data(&ds), &TrainConfig { max_epochs: 1, ..TrainConfig::default() }).unwrap();
    let text = out.log.to_csv().unwrap();
    assert!(text.starts_with("epoch,loss_mean,val_r1,val_r5,val_r10,"));
    assert_eq!(seqplace::training::TrainingLog::from_csv(&text).unwrap(), out.log);
}
