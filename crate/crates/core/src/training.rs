//! Weakly supervised triplet training with a cached pool of hard negatives
//! and early stopping on validation recall@5.

use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{GeoTag, Sequence, SequentialDescriptor};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalConfig, GeoIndex, DEFAULT_THRESHOLD_M};
use crate::heads::{Head, HeadGradients};
use crate::retrieval::RetrievalIndex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub margin: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub negatives: usize,
    pub cache_size: usize,
    pub cache_refresh_every: usize,
    pub epoch_queries: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub threshold_m: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            margin: 0.1,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 4,
            negatives: 5,
            cache_size: 1000,
            cache_refresh_every: 1000,
            epoch_queries: 5000,
            patience: 5,
            max_epochs: 50,
            threshold_m: DEFAULT_THRESHOLD_M,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("negatives", self.negatives),
            ("cache_size", self.cache_size),
            ("cache_refresh_every", self.cache_refresh_every),
            ("epoch_queries", self.epoch_queries),
            ("patience", self.patience),
            ("max_epochs", self.max_epochs),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.margin.is_finite() && self.margin >= 0.0) {
            return Err(Error::Config(format!("margin must be finite and >= 0, got {}", self.margin)));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if !(self.adam_eps > 0.0 && self.threshold_m > 0.0) {
            return Err(Error::Config("adam_eps and threshold_m must be positive".into()));
        }
        Ok(())
    }
}

/// Loss value and its gradients with respect to each descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletLoss {
    pub loss: f64,
    pub grad_query: Vec<f64>,
    pub grad_positive: Vec<f64>,
    pub grad_negatives: Vec<Vec<f64>>,
    pub active: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `sum_n max(0, |q - p|^2 - |q - n|^2 + margin)`.
pub fn triplet_loss(q: &[f64], p: &[f64], negatives: &[&[f64]], margin: f64) -> Result<TripletLoss> {
    let d = q.len();
    if p.len() != d || negatives.iter().any(|n| n.len() != d) {
        return Err(Error::Shape("triplet descriptors have different dimensions".into()));
    }
    let d_pos = sq_dist(q, p);
    let mut out = TripletLoss {
        loss: 0.0,
        grad_query: vec![0.0; d],
        grad_positive: vec![0.0; d],
        grad_negatives: vec![vec![0.0; d]; negatives.len()],
        active: 0,
    };
    for (n, gn) in negatives.iter().zip(out.grad_negatives.iter_mut()) {
        let h = d_pos - sq_dist(q, n) + margin;
        if h <= 0.0 {
            continue;
        }
        out.loss += h;
        out.active += 1;
        for j in 0..d {
            out.grad_query[j] += 2.0 * (n[j] - p[j]);
            out.grad_positive[j] -= 2.0 * (q[j] - p[j]);
            gn[j] += 2.0 * (q[j] - n[j]);
        }
    }
    Ok(out)
}

/// Adam with bias correction, one moment pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(head: &Head, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = head.parameters().iter().map(|p| vec![0.0; p.len()]).collect();
        Adam { lr, beta1, beta2, eps, m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, head: &mut Head, grads: &HeadGradients) -> Result<()> {
        let mut params = head.parameters_mut();
        if params.len() != grads.params.len() || params.len() != self.m.len() {
            return Err(Error::Shape("gradient tensors do not match head parameters".into()));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params.iter_mut().zip(&grads.params).zip(&mut self.m).zip(&mut self.v) {
            if p.len() != g.len() {
                return Err(Error::Shape("gradient tensor length differs from parameter".into()));
            }
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Database sequences sampled once per refresh, with descriptors from the
/// head parameters at refresh time.
#[derive(Debug, Clone)]
pub struct NegativeCache {
    entries: Vec<(usize, SequentialDescriptor)>,
    since_refresh: usize,
    refreshes: usize,
}

impl NegativeCache {
    pub fn new() -> Self {
        NegativeCache { entries: Vec::new(), since_refresh: 0, refreshes: 0 }
    }

    pub fn from_entries(entries: Vec<(usize, SequentialDescriptor)>) -> Self {
        NegativeCache { entries, since_refresh: 0, refreshes: 0 }
    }

    pub fn entries(&self) -> &[(usize, SequentialDescriptor)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn refreshes(&self) -> usize {
        self.refreshes
    }

    pub fn triplets_since_refresh(&self) -> usize {
        self.since_refresh
    }

    pub fn record_triplet(&mut self) {
        self.since_refresh += 1;
    }

    /// Resample `min(size, N_db)` entries uniformly and describe them.
    pub fn refresh(&mut self, head: &Head, database: &[Sequence], size: usize, rng: &mut ChaCha8Rng) -> Result<()> {
        let take = size.min(database.len());
        let mut picked = index::sample(rng, database.len(), take).into_vec();
        picked.sort_unstable();
        let seqs: Vec<Sequence> = picked.iter().map(|&i| database[i].clone()).collect();
        let descs = head.describe_all(&seqs)?;
        self.entries = picked.into_iter().zip(descs).collect();
        self.since_refresh = 0;
        self.refreshes += 1;
        Ok(())
    }
}

impl Default for NegativeCache {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Triplet<'a> {
    pub query: &'a Sequence,
    pub positive: &'a Sequence,
    pub negatives: Vec<&'a Sequence>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkipReason {
    NoPositive,
    TooFewNegatives { found: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Mined<'a> {
    Triplet(Triplet<'a>),
    Skipped(SkipReason),
}

fn mean_position(tags: &[GeoTag]) -> (f64, f64) {
    let n = tags.len() as f64;
    let e = tags.iter().map(|t| t.easting).sum::<f64>() / n;
    let no = tags.iter().map(|t| t.northing).sum::<f64>() / n;
    (e, no)
}

/// The correct match whose mean position is closest to the query's, ties
/// by ascending id.
pub fn nearest_positive(query: &Sequence, database: &[Sequence], geo: &GeoIndex) -> Option<usize> {
    let qtags = query.geotags();
    let (qe, qn) = mean_position(&qtags);
    geo.positives(&qtags)
        .into_iter()
        .map(|i| {
            let (e, n) = mean_position(geo.tags(i));
            ((e - qe).hypot(n - qn), i)
        })
        .min_by(|a, b| a.0.total_cmp(&b.0).then_with(|| database[a.1].seq_id().cmp(database[b.1].seq_id())))
        .map(|(_, i)| i)
}

/// Hard negatives: the `count` cache entries closest to `query_desc` in
/// descriptor space among those that are not correct matches.
pub fn hard_negatives(
    query: &Sequence,
    query_desc: &[f64],
    database: &[Sequence],
    cache: &NegativeCache,
    geo: &GeoIndex,
    count: usize,
) -> Vec<usize> {
    let qtags = query.geotags();
    let mut far: Vec<(f64, usize)> = cache
        .entries()
        .iter()
        .filter(|(i, _)| !geo.is_positive(&qtags, *i))
        .map(|(i, d)| (sq_dist(query_desc, d.values()), *i))
        .collect();
    far.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| database[a.1].seq_id().cmp(database[b.1].seq_id())));
    far.into_iter().take(count).map(|(_, i)| i).collect()
}

/// Build a triplet for `query`, or report why it cannot be formed.
pub fn mine_triplet<'a>(
    query: &'a Sequence,
    query_desc: &[f64],
    database: &'a [Sequence],
    cache: &NegativeCache,
    geo: &GeoIndex,
    negatives: usize,
) -> Mined<'a> {
    let Some(pos) = nearest_positive(query, database, geo) else {
        return Mined::Skipped(SkipReason::NoPositive);
    };
    let negs = hard_negatives(query, query_desc, database, cache, geo, negatives);
    if negs.len() < negatives {
        return Mined::Skipped(SkipReason::TooFewNegatives { found: negs.len() });
    }
    Mined::Triplet(Triplet { query, positive: &database[pos], negatives: negs.into_iter().map(|i| &database[i]).collect() })
}

/// Loss of one triplet and the parameter gradients of that loss.
pub fn triplet_gradients(head: &Head, t: &Triplet<'_>, margin: f64) -> Result<(TripletLoss, HeadGradients)> {
    let q = head.describe(t.query)?;
    let p = head.describe(t.positive)?;
    let ns: Vec<SequentialDescriptor> = t.negatives.iter().map(|n| head.describe(n)).collect::<Result<_>>()?;
    let nrefs: Vec<&[f64]> = ns.iter().map(|d| d.values()).collect();
    let tl = triplet_loss(q.values(), p.values(), &nrefs, margin)?;
    let mut grads = head.zero_gradients();
    if tl.active > 0 {
        grads.accumulate(&head.backward(t.query, &tl.grad_query)?);
        grads.accumulate(&head.backward(t.positive, &tl.grad_positive)?);
        for (n, g) in t.negatives.iter().zip(&tl.grad_negatives) {
            grads.accumulate(&head.backward(n, g)?);
        }
    }
    Ok((tl, grads))
}

/// Training and validation data.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub train_database: &'a [Sequence],
    pub train_queries: &'a [Sequence],
    pub val_database: &'a [Sequence],
    pub val_queries: &'a [Sequence],
}

/// One row of the training log. Epoch 0 evaluates the initial head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_mean: f64,
    pub val_r1: f64,
    pub val_r5: f64,
    pub val_r10: f64,
    pub queries: usize,
    pub triplets: usize,
    pub skipped: usize,
    pub optimizer_steps: usize,
    pub batch_size: usize,
    pub negatives_per_triplet: usize,
    pub cache_size: usize,
    pub cache_refreshes: usize,
    pub patience: usize,
    pub best_r5: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub rows: Vec<EpochLog>,
}

impl TrainingLog {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        }
        if self.rows.is_empty() {
            return Err(Error::InvalidInput("training log is empty".into()));
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let rows = r
            .deserialize()
            .collect::<std::result::Result<Vec<EpochLog>, _>>()
            .map_err(|e| Error::Format(format!("training log: {e}")))?;
        Ok(TrainingLog { rows })
    }

    /// The log without timing, which is the part that must be reproducible.
    pub fn without_timing(&self) -> Vec<EpochLog> {
        self.rows.iter().cloned().map(|r| EpochLog { wall_time_s: 0.0, ..r }).collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Head with the best validation recall@5 seen, including epoch 0.
    pub best_head: Head,
    pub best_epoch: usize,
    pub last_head: Head,
    pub log: TrainingLog,
    pub stopped_early: bool,
}

fn validate_recalls(head: &Head, database: &[Sequence], queries: &[Sequence], threshold_m: f64) -> Result<[f64; 3]> {
    let cfg = EvalConfig { ns: vec![1, 5, 10], threshold_m };
    let index = RetrievalIndex::build(database, &head.describe_all(database)?)?;
    let r = evaluate(&index, queries, head, &cfg)?;
    Ok([r.recalls[0], r.recalls[1], r.recalls[2]])
}

fn diagnose(t: &Triplet<'_>, tl: &TripletLoss) -> String {
    let negs: Vec<&str> = t.negatives.iter().map(|n| n.seq_id()).collect();
    format!(
        "non-finite triplet loss {} (query {}, positive {}, negatives {:?}, |grad_q| finite: {})",
        tl.loss,
        t.query.seq_id(),
        t.positive.seq_id(),
        negs,
        tl.grad_query.iter().all(|v| v.is_finite())
    )
}

/// Train `head` until validation recall@5 stops improving for
/// `cfg.patience` epochs or `cfg.max_epochs` is reached.
pub fn train(head: Head, data: TrainData<'_>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train_database.is_empty() || data.val_database.is_empty() {
        return Err(Error::Config("training and validation databases must be non-empty".into()));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(0x7472_6169_6e);
    let mut head = head;
    let mut adam = Adam::new(&head, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let geo = GeoIndex::new(data.train_database.iter().map(|s| s.geotags()).collect(), cfg.threshold_m);
    let eligible: Vec<usize> =
        (0..data.train_queries.len()).filter(|&i| !geo.positives(&data.train_queries[i].geotags()).is_empty()).collect();
    if eligible.is_empty() {
        return Err(Error::Config("no training query has a geographic positive".into()));
    }
    let skipped_no_positive = data.train_queries.len() - eligible.len();
    if skipped_no_positive > 0 {
        log::info!("{skipped_no_positive} training queries have no positive and are never used");
    }
    let cache_size = cfg.cache_size.min(data.train_database.len());

    let [r1, r5, r10] = validate_recalls(&head, data.val_database, data.val_queries, cfg.threshold_m)?;
    let mut log = TrainingLog::default();
    log.rows.push(EpochLog {
        epoch: 0,
        loss_mean: 0.0,
        val_r1: r1,
        val_r5: r5,
        val_r10: r10,
        queries: 0,
        triplets: 0,
        skipped: 0,
        optimizer_steps: 0,
        batch_size: cfg.batch_size,
        negatives_per_triplet: cfg.negatives,
        cache_size,
        cache_refreshes: 0,
        patience: 0,
        best_r5: r5,
        wall_time_s: start.elapsed().as_secs_f64(),
    });
    log::info!("epoch 0: val r@1 {r1:.4} r@5 {r5:.4} r@10 {r10:.4}");
    let mut best = (r5, 0usize, head.clone());
    let mut patience = 0usize;
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        let mut order = eligible.clone();
        order.shuffle(&mut rng);
        order.truncate(cfg.epoch_queries);

        let mut cache = NegativeCache::new();
        let mut batch = head.zero_gradients();
        let mut in_batch = 0usize;
        let (mut loss_sum, mut triplets, mut skipped, mut steps) = (0.0, 0usize, 0usize, 0usize);
        for &qi in &order {
            if cache.refreshes() == 0 || cache.triplets_since_refresh() >= cfg.cache_refresh_every {
                cache.refresh(&head, data.train_database, cache_size, &mut rng)?;
            }
            let query = &data.train_queries[qi];
            let qdesc = head.describe(query)?;
            let t = match mine_triplet(query, qdesc.values(), data.train_database, &cache, &geo, cfg.negatives) {
                Mined::Triplet(t) => t,
                Mined::Skipped(reason) => {
                    log::debug!("skipping query {}: {reason:?}", query.seq_id());
                    skipped += 1;
                    continue;
                }
            };
            let (tl, grads) = triplet_gradients(&head, &t, cfg.margin)?;
            if !tl.loss.is_finite() || !grads.is_finite() {
                return Err(Error::Numerical(diagnose(&t, &tl)));
            }
            loss_sum += tl.loss;
            triplets += 1;
            cache.record_triplet();
            batch.accumulate(&grads);
            in_batch += 1;
            if in_batch == cfg.batch_size {
                batch.scale(1.0 / in_batch as f64);
                adam.step(&mut head, &batch)?;
                steps += 1;
                batch = head.zero_gradients();
                in_batch = 0;
            }
        }
        if in_batch > 0 {
            batch.scale(1.0 / in_batch as f64);
            adam.step(&mut head, &batch)?;
            steps += 1;
        }
        if head.parameters().iter().any(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numerical(format!("head parameters became non-finite in epoch {epoch}")));
        }

        let [r1, r5, r10] = validate_recalls(&head, data.val_database, data.val_queries, cfg.threshold_m)?;
        if r5 > best.0 {
            best = (r5, epoch, head.clone());
            patience = 0;
        } else {
            patience += 1;
        }
        let loss_mean = if triplets > 0 { loss_sum / triplets as f64 } else { 0.0 };
        log.rows.push(EpochLog {
            epoch,
            loss_mean,
            val_r1: r1,
            val_r5: r5,
            val_r10: r10,
            queries: order.len(),
            triplets,
            skipped,
            optimizer_steps: steps,
            batch_size: cfg.batch_size,
            negatives_per_triplet: cfg.negatives,
            cache_size,
            cache_refreshes: cache.refreshes(),
            patience,
            best_r5: best.0,
            wall_time_s: start.elapsed().as_secs_f64(),
        });
        log::info!("epoch {epoch}: loss {loss_mean:.5} val r@1 {r1:.4} r@5 {r5:.4} r@10 {r10:.4} patience {patience}");
        if patience >= cfg.patience {
            stopped_early = true;
            break;
        }
    }
    Ok(TrainOutcome { best_head: best.2, best_epoch: best.1, last_head: head, log, stopped_early })
}
