//! Property tests for the invariants the pipeline relies on.

use finecount::counting::{extract_count, specialize, CountField};
use finecount::evaluation::{metric, ErrorFn, EvalRecord, MetricOptions};
use finecount::grid::{resize_bilinear, resize_nearest};
use finecount::slug;
use finecount::specializer::{
    load_concept, select_checkpoint, write_concept, ConceptFile, EpochRecord,
};
use finecount::synthesis::{binarize, mask_from_rle, mask_to_rle, normalize_map};
use ndarray::Array2;
use proptest::prelude::*;

fn grid(
    max: usize,
    values: impl Strategy<Value = f64> + Clone,
) -> impl Strategy<Value = Array2<f64>> {
    (1..=max, 1..=max).prop_flat_map(move |(r, c)| {
        prop::collection::vec(values.clone(), r * c)
            .prop_map(move |v| Array2::from_shape_vec((r, c), v).unwrap())
    })
}

fn density_and_mask() -> impl Strategy<Value = (Array2<f64>, Array2<f64>)> {
    (1..12usize, 1..12usize).prop_flat_map(|(r, c)| {
        (
            prop::collection::vec(0.0..4.0f64, r * c),
            prop::collection::vec(prop_oneof![Just(0.0), Just(1.0), 0.0..=1.0f64], r * c),
        )
            .prop_map(move |(d, m)| {
                (
                    Array2::from_shape_vec((r, c), d).unwrap(),
                    Array2::from_shape_vec((r, c), m).unwrap(),
                )
            })
    })
}

fn records() -> impl Strategy<Value = Vec<EvalRecord>> {
    prop::collection::vec(("[a-d]", 1..50u32, 0.0..60.0f64), 1..40).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (sub, y, y_hat))| EvalRecord {
                image_id: format!("img{i}"),
                subcategory: sub,
                parent: "p".into(),
                y: f64::from(y),
                y_hat,
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn normalized_maps_span_the_unit_interval(raw in grid(8, -100.0..100.0f64)) {
        let out = normalize_map(&raw);
        prop_assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        let constant = raw.iter().all(|v| *v == raw[[0, 0]]);
        if constant {
            prop_assert!(out.iter().all(|v| *v == 0.0));
        } else {
            prop_assert_eq!(out.iter().cloned().fold(f64::MIN, f64::max), 1.0);
            prop_assert_eq!(out.iter().cloned().fold(f64::MAX, f64::min), 0.0);
        }
    }

    #[test]
    fn binarized_area_shrinks_as_the_threshold_rises(map in grid(8, 0.0..=1.0f64), a in 0.01..0.99f64, b in 0.01..0.99f64) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let small = binarize(&map, hi);
        let large = binarize(&map, lo);
        prop_assert!(small.iter().zip(large.iter()).all(|(s, l)| s <= l));
    }

    #[test]
    fn resizing_stays_within_the_input_range(src in grid(9, -5.0..5.0f64), r in 1..20usize, c in 1..20usize) {
        let lo = src.iter().cloned().fold(f64::MAX, f64::min);
        let hi = src.iter().cloned().fold(f64::MIN, f64::max);
        let bi = resize_bilinear(&src, (r, c));
        prop_assert_eq!(bi.dim(), (r, c));
        prop_assert!(bi.iter().all(|v| *v >= lo - 1e-12 && *v <= hi + 1e-12));
        let nn = resize_nearest(&src, (r, c));
        prop_assert!(nn.iter().all(|v| src.iter().any(|s| s == v)));
    }

    #[test]
    fn density_specialization_never_adds_mass((density, mask) in density_and_mask()) {
        let (r, c) = density.dim();
        let raw = CountField::density(density, (c as u32, r as u32), "p", "p");
        let out = specialize(&raw, &mask, 0.5).unwrap();
        prop_assert!(extract_count(&out.field) <= extract_count(&raw));
        let same = specialize(&raw, &Array2::ones((r, c)), 0.5).unwrap();
        prop_assert_eq!(same.field, raw);
    }

    #[test]
    fn point_specialization_partitions_the_input(
        pts in prop::collection::vec((0.0..32.0f64, 0.0..24.0f64), 0..40),
        mask in prop::collection::vec(0.0..=1.0f64, 24 * 32),
        tau in 0.0..=1.0f64,
    ) {
        let raw = CountField::points(pts.clone(), (32, 24), "p", "p");
        let mask = Array2::from_shape_vec((24, 32), mask).unwrap();
        let out = specialize(&raw, &mask, tau).unwrap();
        prop_assert_eq!(out.retained.len() + out.discarded.len(), pts.len());
        prop_assert!(out.field.points.iter().all(|p| pts.contains(p)));
        prop_assert!(out.discarded.iter().all(|p| pts.contains(p)));
    }

    #[test]
    fn metrics_ignore_record_order(mut recs in records(), seed in any::<u64>()) {
        let opts = MetricOptions::default();
        let before: Vec<f64> = [ErrorFn::Abs, ErrorFn::Sq, ErrorFn::RelAbs]
            .iter()
            .map(|f| metric(&recs, *f, &opts).unwrap())
            .collect();
        let n = recs.len();
        recs.rotate_left((seed as usize) % n);
        recs.reverse();
        for (f, b) in [ErrorFn::Abs, ErrorFn::Sq, ErrorFn::RelAbs].iter().zip(before) {
            let a = metric(&recs, *f, &opts).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
            prop_assert!(a >= 0.0);
        }
    }

    #[test]
    fn perfect_predictions_score_zero(mut recs in records()) {
        for r in &mut recs {
            r.y_hat = r.y;
        }
        let opts = MetricOptions::default();
        for f in [ErrorFn::Abs, ErrorFn::Sq, ErrorFn::RelAbs] {
            prop_assert_eq!(metric(&recs, f, &opts).unwrap(), 0.0);
        }
    }

    #[test]
    fn rle_round_trips(r in 1..20usize, c in 1..20usize, bits in prop::collection::vec(any::<bool>(), 400)) {
        let mask = Array2::from_shape_fn((r, c), |(i, j)| u8::from(bits[i * c + j]));
        prop_assert_eq!(mask_from_rle(&mask_to_rle(&mask), (r, c)), Some(mask));
    }

    #[test]
    fn selection_picks_a_flat_epoch(
        hist in prop::collection::vec((0.0..1.0f64, 0.0..2.0f64), 1..60),
        fraction in 0.01..=1.0f64,
    ) {
        let history: Vec<EpochRecord> = hist
            .iter()
            .enumerate()
            .map(|(i, &(val_loss, sharpness))| EpochRecord {
                epoch: i + 1,
                train_loss: 0.0,
                val_loss,
                sharpness,
                lr: 1e-3,
            })
            .collect();
        let i = select_checkpoint(&history, fraction).unwrap();
        let keep = ((fraction * history.len() as f64).ceil() as usize).clamp(1, history.len());
        let flatter = history.iter().filter(|h| h.sharpness < history[i].sharpness).count();
        prop_assert!(flatter < keep);
    }

    #[test]
    fn slugs_are_stable_and_safe(name in "\\PC{0,24}") {
        let s = slug(&name);
        prop_assert!(s.chars().all(|ch| ch.is_ascii_lowercase() || ch.is_ascii_digit() || ch == '_'));
        prop_assert_eq!(slug(&s), s.clone());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn concept_files_round_trip_exactly(z in prop::collection::vec(-1e3..1e3f64, 512), tiny in 1e-300..1e-290f64) {
        let dir = tempfile::tempdir().unwrap();
        let mut z = z;
        z[0] = tiny;
        let file = ConceptFile {
            category: "Blue Triangle".into(),
            init: Default::default(),
            selected_epoch: 3,
            segmenter: "toy".into(),
            segmenter_checksum: "abc".into(),
            config_hash: "def".into(),
            history: Vec::new(),
            z,
        };
        let path = write_concept(dir.path(), &file).unwrap();
        prop_assert_eq!(load_concept(&path).unwrap(), file);
    }
}
