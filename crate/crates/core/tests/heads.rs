mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seqplace::heads::{
    init_seqvlad, load_checkpoint, save_checkpoint, Cat, Fc, FrameHead, SeqVlad, SeqVladParams, TemporalConv,
};
use seqplace::{Error, ErrorCategory, FeatureLayout, FeatureTensor, Frame, GeoTag, Head, LocalDescriptorSet, Sequence};

fn random_sequence(len: usize, layout: FeatureLayout, dim: usize, rng: &mut ChaCha8Rng) -> Sequence {
    let frames = (0..len)
        .map(|f| Frame {
            frame_id: format!("f{f}"),
            geotag: GeoTag::new(5.0 * f as f64, 0.0).unwrap(),
            features: FeatureTensor::new(
                layout,
                dim,
                (0..layout.cells() * dim).map(|_| rng.random_range(-1.0f32..1.0)).collect::<Vec<f32>>(),
            )
            .unwrap(),
        })
        .collect();
    Sequence::new("seq", frames).unwrap()
}

fn chunks(v: &[f64], d: usize) -> Vec<Vec<f64>> {
    v.chunks(d).map(|c| c.to_vec()).collect()
}

#[test]
fn seqvlad_matches_two_loop_oracle_on_a_fixed_set() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (m, d, k) = (12, 4, 3);
    let x: Vec<f64> = (0..m * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let c: Vec<f64> = (0..k * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w: Vec<f64> = (0..k * d).map(|_| rng.random_range(-2.0..2.0)).collect();
    let b: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
    let set = LocalDescriptorSet::new(m, d, x.clone()).unwrap();
    for intra in [true, false] {
        let head = SeqVlad::new(SeqVladParams::new(k, d, c.clone(), w.clone(), b.clone()).unwrap()).with_intra_norm(intra);
        let got = head.forward(&set).unwrap();
        let want = common::netvlad_two_loop(&chunks(&x, d), &chunks(&c, d), &chunks(&w, d), &b, intra);
        for (g, e) in got.values().iter().zip(&want) {
            assert!((g - e).abs() < 1e-12, "{g} vs {e}");
        }
    }
}

#[test]
fn seqvlad_ignores_frame_order_and_length_for_dim() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let seqs: Vec<Sequence> = (1..=9).step_by(2).map(|l| random_sequence(l, FeatureLayout::Grid { h: 2, w: 2 }, 6, &mut rng)).collect();
    let head = Head::SeqVlad(init_seqvlad(&seqs, 5, 10.0, &mut rng).unwrap());
    for s in &seqs {
        let (a, b) = (head.describe(s).unwrap(), head.describe(&s.reversed()).unwrap());
        assert_eq!(a.dim(), 30);
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn cat_of_five_64_dim_frames_is_320_dim() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let s = random_sequence(5, FeatureLayout::Tokens { t: 3 }, 64, &mut rng);
    let cat = Head::Cat(Cat::new(FrameHead::MeanPool));
    assert_eq!(cat.describe(&s).unwrap().dim(), 320);
    assert_eq!(cat.output_dim(5, 64).unwrap(), 320);
    assert_ne!(cat.describe(&s).unwrap(), cat.describe(&s.reversed()).unwrap());
}

#[test]
fn checkpoints_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    // Describe a sequence k-means never saw. On its own training data each
    // residual block sums to nearly zero, and intra-normalization would
    // magnify the f32 rounding.
    let train = vec![random_sequence(3, FeatureLayout::Grid { h: 4, w: 4 }, 4, &mut rng)];
    let vlad = init_seqvlad(&train, 3, 100.0, &mut rng).unwrap();
    let seqs = vec![random_sequence(3, FeatureLayout::Grid { h: 4, w: 4 }, 4, &mut rng)];
    let heads = [
        Head::SeqVlad(vlad.clone()),
        Head::Cat(Cat::new(FrameHead::NetVlad(vlad.clone()))),
        Head::Fc { fc: Fc::random(3, 4, 8, 1).unwrap(), frame_head: FrameHead::MeanPool },
        Head::TemporalConv { conv: TemporalConv::averaging(2, 12).unwrap(), frame_head: FrameHead::NetVlad(vlad) },
    ];
    for (i, h) in heads.iter().enumerate() {
        let path = dir.path().join(format!("h{i}.sqph"));
        save_checkpoint(h, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        // Values are stored as f32, so compare descriptors rather than bits.
        let (a, b) = (h.describe(&seqs[0]).unwrap(), back.describe(&seqs[0]).unwrap());
        assert_eq!(back.kind(), h.kind());
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() < 1e-4, "head {i}: {x} vs {y}");
        }
    }
    let junk = dir.path().join("junk.sqph");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    assert!(matches!(load_checkpoint(&junk), Err(Error::Format(_))));
    assert_eq!(load_checkpoint(dir.path().join("missing")).unwrap_err().category(), ErrorCategory::Io);
}
