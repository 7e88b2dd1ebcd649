//! Subcommand bodies. Inputs are only read; every artifact goes under `out`.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use seqplace::evaluation::{
    bench_csv, bench_knn, evaluate_descriptors, experiment_reverse_db, experiment_seq_length, is_correct_match_tags,
    linear_fit, BenchConfig, EvalConfig, Method, SeqLengthSetup,
};
use seqplace::features::{generate_synthetic_dataset, load_all, DatasetManifest, Role, Split, SyntheticWorldConfig};
use seqplace::heads::{init_seqvlad, load_checkpoint, save_checkpoint, Cat, Fc, FrameHead, TemporalConv};
use seqplace::retrieval::{pca_fit, PcaModel, RetrievalIndex};
use seqplace::training::{train as train_head, TrainData};
use seqplace::{Error, Frame, Head, HeadKind, Result, Sequence, SequentialDescriptor};

use crate::config::RunConfig;

fn out_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn load(data: &Path, split: Split, role: Role) -> Result<Vec<Sequence>> {
    load_all(&DatasetManifest::load(data, split, role)?)
}

pub fn generate(world: &SyntheticWorldConfig, out: &Path) -> Result<()> {
    out_dir(out)?;
    let ds = generate_synthetic_dataset(world, out)?;
    for split in Split::ALL {
        let s = ds.split(split);
        println!(
            "{}: {} database and {} query sequences",
            split.as_str(),
            s.database.sequences.len(),
            s.queries.sequences.len()
        );
    }
    Ok(())
}

fn init_head(cfg: &RunConfig, train_db: &[Sequence]) -> Result<Head> {
    let h = &cfg.head;
    let first = train_db.first().ok_or_else(|| Error::Config("training database is empty".into()))?;
    let (len, dim) = (first.len(), first.dim());
    let seed = cfg.train.seed;
    Ok(match h.kind.parse::<HeadKind>()? {
        HeadKind::SeqVlad => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Head::SeqVlad(init_seqvlad(train_db, h.clusters, h.alpha, &mut rng)?)
        }
        HeadKind::Cat => Head::Cat(Cat::new(FrameHead::MeanPool)),
        HeadKind::Fc => Head::Fc { fc: Fc::random(len, dim, h.out_dim, seed)?, frame_head: FrameHead::MeanPool },
        HeadKind::TemporalConv => Head::TemporalConv {
            conv: TemporalConv::averaging(h.tconv_width, dim)?,
            frame_head: FrameHead::MeanPool,
        },
    })
}

pub fn train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    cfg.train.validate()?;
    let train_db = load(data, Split::Train, Role::Database)?;
    let train_q = load(data, Split::Train, Role::Query)?;
    let val_db = load(data, Split::Val, Role::Database)?;
    let val_q = load(data, Split::Val, Role::Query)?;
    let head = init_head(cfg, &train_db)?;
    out_dir(out)?;
    write_json(&out.join("run_config.json"), cfg)?;
    if head.parameter_count() == 0 {
        log::warn!("{} head has no parameters; writing it untrained", head.kind().as_str());
        save_checkpoint(&head, out.join("best.ckpt"))?;
        return save_checkpoint(&head, out.join("last.ckpt"));
    }
    let data = TrainData { train_database: &train_db, train_queries: &train_q, val_database: &val_db, val_queries: &val_q };
    let outcome = train_head(head, data, &cfg.train)?;
    save_checkpoint(&outcome.best_head, out.join("best.ckpt"))?;
    save_checkpoint(&outcome.last_head, out.join("last.ckpt"))?;
    fs::write(out.join("training_log.csv"), outcome.log.to_csv()?)?;
    let best = &outcome.log.rows[outcome.best_epoch];
    println!(
        "best epoch {} val recall@1 {:.4} @5 {:.4} @10 {:.4}{}",
        outcome.best_epoch,
        best.val_r1,
        best.val_r5,
        best.val_r10,
        if outcome.stopped_early { " (stopped early)" } else { "" }
    );
    Ok(())
}

pub struct IndexJob<'a> {
    pub data: &'a Path,
    pub checkpoint: &'a Path,
    pub split: Split,
    pub pca: Option<usize>,
    pub whiten: bool,
}

pub fn index(job: &IndexJob<'_>, out: &Path) -> Result<()> {
    let head = load_checkpoint(job.checkpoint)?;
    let db = load(job.data, job.split, Role::Database)?;
    let mut descs = head.describe_all(&db)?;
    out_dir(out)?;
    if let Some(dim) = job.pca {
        // Fit on the training database so the held-out split stays unseen.
        let train_db = load(job.data, Split::Train, Role::Database)?;
        let model = pca_fit(&head.describe_all(&train_db)?.iter().map(|d| d.values().to_vec()).collect::<Vec<_>>(), dim, job.whiten)?;
        descs = model.apply_all(&descs)?;
        write_json(&out.join("pca.json"), &model)?;
    }
    let index = RetrievalIndex::build(&db, &descs)?;
    index.save(out.join("index.sqpi"))?;
    println!("indexed {} sequences at dim {} ({} bytes)", index.len(), index.dim(), index.memory_bytes());
    Ok(())
}

pub struct RetrievalJob<'a> {
    pub data: &'a Path,
    pub checkpoint: &'a Path,
    pub index: &'a Path,
    pub pca: Option<&'a Path>,
    pub split: Split,
}

struct Loaded {
    head: Head,
    index: RetrievalIndex,
    queries: Vec<Sequence>,
    descs: Vec<SequentialDescriptor>,
}

impl RetrievalJob<'_> {
    fn load(&self) -> Result<Loaded> {
        let head = load_checkpoint(self.checkpoint)?;
        let index = RetrievalIndex::load(self.index)?;
        let queries = load(self.data, self.split, Role::Query)?;
        let mut descs = head.describe_all(&queries)?;
        if let Some(p) = self.pca {
            let model: PcaModel = serde_json::from_str(&fs::read_to_string(p)?)?;
            descs = model.apply_all(&descs)?;
        }
        if let Some(d) = descs.first() {
            if d.dim() != index.dim() {
                return Err(Error::Shape(format!(
                    "{} head gives {}-dim query descriptors but the index holds {}-dim rows",
                    head.kind().as_str(),
                    d.dim(),
                    index.dim()
                )));
            }
        }
        Ok(Loaded { head, index, queries, descs })
    }
}

pub fn query(job: &RetrievalJob<'_>, top_n: usize, only: Option<&str>, out: &Path) -> Result<()> {
    let l = job.load()?;
    let picked: Vec<usize> = match only {
        Some(id) => vec![l
            .queries
            .iter()
            .position(|q| q.seq_id() == id)
            .ok_or_else(|| Error::NotFound(format!("query {id:?}")))?],
        None => (0..l.queries.len()).collect(),
    };
    out_dir(out)?;
    let mut w = csv::Writer::from_path(out.join("retrievals.csv")).map_err(csv_err)?;
    w.write_record(["query_id", "rank", "database_id", "distance", "correct"]).map_err(csv_err)?;
    for &qi in &picked {
        let q = &l.queries[qi];
        let tags = q.geotags();
        for (rank, n) in l.index.knn_search(l.descs[qi].values(), top_n)?.iter().enumerate() {
            let correct = is_correct_match_tags(&tags, l.index.geotags(n.index), seqplace::evaluation::DEFAULT_THRESHOLD_M);
            w.write_record([
                q.seq_id(),
                &(rank + 1).to_string(),
                l.index.id(n.index),
                &format!("{:.6}", n.distance),
                if correct { "1" } else { "0" },
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    println!("{} queries against {} {} database sequences", picked.len(), l.index.len(), l.head.kind().as_str());
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("{other:?}")),
    }
}

fn print_recalls(label: &str, ns: &[usize], recalls: &[f64]) {
    let parts: Vec<String> = ns.iter().zip(recalls).map(|(n, r)| format!("R@{n} {r:.4}")).collect();
    println!("{label}: {}", parts.join(" "));
}

pub fn evaluate(job: &RetrievalJob<'_>, cfg: &EvalConfig, out: &Path) -> Result<()> {
    let l = job.load()?;
    let report = evaluate_descriptors(l.head.kind().as_str(), &l.index, &l.queries, &l.descs, cfg)?;
    out_dir(out)?;
    fs::write(out.join("report.json"), report.to_json()?)?;
    fs::write(out.join("recalls.csv"), report.recalls_csv()?)?;
    fs::write(out.join("hits.csv"), report.hits_csv()?)?;
    print_recalls(&report.method, &report.ns, &report.recalls);
    if report.queries_without_positive > 0 {
        println!("{} queries without a positive excluded", report.queries_without_positive);
    }
    Ok(())
}

#[derive(Serialize)]
struct BenchSummary {
    dim: usize,
    slope_ms_per_row: f64,
    intercept_ms: f64,
    r2: f64,
}

pub fn bench(cfg: &BenchConfig, out: &Path) -> Result<()> {
    let rows = bench_knn(cfg)?;
    out_dir(out)?;
    fs::write(out.join("bench.csv"), bench_csv(&rows)?)?;
    let mut fits = Vec::new();
    for &dim in &cfg.dims {
        let (xs, ys): (Vec<f64>, Vec<f64>) =
            rows.iter().filter(|r| r.dim == dim).map(|r| (r.n_db as f64, r.mean_ms)).unzip();
        if xs.len() >= 2 {
            let f = linear_fit(&xs, &ys)?;
            println!("D={dim}: {:.3e} ms per database row, R^2 {:.4}", f.slope, f.r2);
            fits.push(BenchSummary { dim, slope_ms_per_row: f.slope, intercept_ms: f.intercept, r2: f.r2 });
        }
    }
    write_json(&out.join("fit.json"), &fits)
}

pub struct ExperimentJob<'a> {
    pub data: &'a Path,
    pub checkpoint: &'a Path,
    pub split: Split,
}

pub fn experiment_reverse(job: &ExperimentJob<'_>, cfg: &RunConfig, out: &Path) -> Result<()> {
    let head = load_checkpoint(job.checkpoint)?;
    let db = load(job.data, job.split, Role::Database)?;
    let queries = load(job.data, job.split, Role::Query)?;
    let mut methods = vec![Method::Descriptor { name: head.kind().as_str().to_string(), head }];
    if !matches!(methods[0], Method::Descriptor { head: Head::Cat(_), .. }) {
        methods.push(Method::Descriptor { name: "cat".into(), head: Head::Cat(Cat::new(FrameHead::MeanPool)) });
    }
    methods.push(Method::SequenceMatching { frame_head: FrameHead::MeanPool, velocities: cfg.eval.velocities.clone() });
    let results = experiment_reverse_db(&methods, &db, &queries, &cfg.eval.eval_config())?;
    out_dir(out)?;
    write_json(&out.join("reverse.json"), &results)?;
    for r in &results {
        print_recalls(&format!("{} forward", r.method), &r.forward.ns, &r.forward.recalls);
        print_recalls(&format!("{} reversed", r.method), &r.reversed.ns, &r.reversed.recalls);
    }
    Ok(())
}

/// Rebuild a traversal from its windows: frames in first-seen order.
fn traversal_frames(seqs: &[Sequence]) -> Vec<Frame> {
    let mut seen = HashSet::new();
    seqs.iter().flat_map(|s| s.frames()).filter(|f| seen.insert(f.frame_id.clone())).cloned().collect()
}

pub fn experiment_length(job: &ExperimentJob<'_>, cfg: &RunConfig, out: &Path) -> Result<()> {
    let head = load_checkpoint(job.checkpoint)?;
    let db = traversal_frames(&load(job.data, job.split, Role::Database)?);
    let queries = traversal_frames(&load(job.data, job.split, Role::Query)?);
    let setup = SeqLengthSetup { database_frames: &db, query_frames: &queries, query_stride: cfg.world.query_stride };
    let rows = experiment_seq_length(&head, setup, &cfg.eval.lengths, &cfg.eval.eval_config())?;
    out_dir(out)?;
    write_json(&out.join("lengths.json"), &rows)?;
    for r in &rows {
        print_recalls(&format!("L={} dim {}", r.length, r.descriptor_dim), &r.report.ns, &r.report.recalls);
    }
    Ok(())
}
