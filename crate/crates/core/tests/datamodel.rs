use proptest::prelude::*;
use seqplace::features::{load_features, DatasetManifest, DatasetWriter, Role, Split};
use seqplace::{fuse_to_local_set, geo_distance, FeatureLayout, FeatureTensor, Frame, GeoTag, Sequence};

fn layout() -> impl Strategy<Value = FeatureLayout> {
    prop_oneof![
        (1usize..4, 1usize..4).prop_map(|(h, w)| FeatureLayout::Grid { h, w }),
        (1usize..7).prop_map(|t| FeatureLayout::Tokens { t }),
    ]
}

prop_compose! {
    fn sequence()(layout in layout(), len in 1usize..6, dim in 1usize..5)
        (data in prop::collection::vec(-4i32..4, len * layout.cells() * dim),
         layout in Just(layout), len in Just(len), dim in Just(dim)) -> Sequence
    {
        let per = layout.cells() * dim;
        let frames = (0..len)
            .map(|f| Frame {
                frame_id: format!("f{f}"),
                geotag: GeoTag::new(f as f64, 0.0).unwrap(),
                features: FeatureTensor::new(
                    layout,
                    dim,
                    data[f * per..(f + 1) * per].iter().map(|&v| v as f32 * 0.5).collect::<Vec<f32>>(),
                )
                .unwrap(),
            })
            .collect();
        Sequence::new("s", frames).unwrap()
    }
}

/// All local descriptors of a sequence, gathered directly from the frames.
fn cells_of(seq: &Sequence) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = seq
        .frames()
        .iter()
        .flat_map(|f| (0..f.features.cells()).map(move |c| f.features.cell(c).iter().map(|&v| v as f64).collect()))
        .collect();
    out.sort_by(|a: &Vec<f64>, b| a.partial_cmp(b).unwrap());
    out
}

fn sorted_rows(seq: &Sequence) -> Vec<Vec<f64>> {
    let set = fuse_to_local_set(seq).unwrap();
    let mut rows: Vec<Vec<f64>> = set.iter().map(|r| r.to_vec()).collect();
    rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
    rows
}

proptest! {
    #[test]
    fn fusion_keeps_every_cell_exactly_once(seq in sequence()) {
        let set = fuse_to_local_set(&seq).unwrap();
        prop_assert_eq!(set.count(), seq.len() * seq.layout().cells());
        prop_assert_eq!(set.dim(), seq.dim());
        prop_assert_eq!(sorted_rows(&seq), cells_of(&seq));
    }

    #[test]
    fn reversal_preserves_the_fused_multiset(seq in sequence()) {
        prop_assert_eq!(sorted_rows(&seq.reversed()), sorted_rows(&seq));
    }

    #[test]
    fn distance_is_symmetric_and_matches_hypot(
        a in (-1e6f64..1e6, -1e6f64..1e6), b in (-1e6f64..1e6, -1e6f64..1e6),
    ) {
        let (p, q) = (GeoTag::new(a.0, a.1).unwrap(), GeoTag::new(b.0, b.1).unwrap());
        let d = geo_distance(&p, &q).unwrap();
        prop_assert_eq!(d, geo_distance(&q, &p).unwrap());
        let want = ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
        prop_assert!((d - want).abs() <= 1e-9 * want.max(1.0));
    }
}

#[test]
fn hand_computed_distance() {
    let d = geo_distance(&GeoTag::new(100.5, 200.25).unwrap(), &GeoTag::new(87.2, 310.0).unwrap()).unwrap();
    let want = (13.3f64 * 13.3 + 109.75 * 109.75).sqrt();
    assert!((d - want).abs() < 1e-9, "{d} vs {want}");
}

#[test]
fn stored_grid_frame_has_header_derived_length() {
    let dir = tempfile::tempdir().unwrap();
    let layout = FeatureLayout::Grid { h: 4, w: 4 };
    let data: Vec<f32> = (0..4 * 4 * 8).map(|i| i as f32 / 7.0).collect();
    let frame = Frame {
        frame_id: "g0".into(),
        geotag: GeoTag::new(1.0, 2.0).unwrap(),
        features: FeatureTensor::new(layout, 8, data).unwrap(),
    };
    let seq = Sequence::new("grid-seq", vec![frame]).unwrap();
    let mut w = DatasetWriter::create(dir.path()).unwrap();
    w.write_sequences(Split::Test, Role::Database, std::slice::from_ref(&seq)).unwrap();
    w.finish().unwrap();
    let manifest = DatasetManifest::load(dir.path(), Split::Test, Role::Database).unwrap();
    let back = load_features(&manifest, "grid-seq").unwrap();
    let tensor = &back.frames()[0].features;
    assert_eq!(tensor.data().len(), 128);
    assert_eq!(tensor.layout(), layout);
    assert_eq!(back, seq);
}
