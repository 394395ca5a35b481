use candle_core::{DType, Device, Tensor};
use proptest::prelude::*;

use spectraleaf::annotation::{parse_labelme, split_dataset, AnnotationSet, PolygonAnnotation};
use spectraleaf::model::focus::{focus, unfocus};
use spectraleaf::model::{focus_slice, unfocus_slice, Instance};
use spectraleaf::spectral::{ClassLabel, Raster, SemanticMask, BACKGROUND};
use spectraleaf::train::augment::{apply_geometric, Geometric};
use spectraleaf::train::{confusion_matrix, dice, iou, map50, Sample};

fn raster() -> impl Strategy<Value = Raster> {
    (1usize..10, 1usize..8, 1usize..8).prop_flat_map(|(c, h2, w2)| {
        prop::collection::vec(0f32..1.0, c * 4 * h2 * w2)
            .prop_map(move |data| Raster::new(c, 2 * h2, 2 * w2, data).unwrap())
    })
}

fn label() -> impl Strategy<Value = u8> {
    prop_oneof![0u8..4, Just(BACKGROUND)]
}

fn semantic(n: usize) -> impl Strategy<Value = SemanticMask> {
    prop::collection::vec(label(), n * n).prop_map(move |l| SemanticMask::new(n, n, l).unwrap())
}

fn geometric() -> impl Strategy<Value = Geometric> {
    prop_oneof![
        Just(Geometric::FlipH),
        Just(Geometric::FlipV),
        (0u8..4).prop_map(Geometric::Rot90),
        (0.0f64..360.0).prop_map(Geometric::Rotate),
    ]
}

fn class() -> impl Strategy<Value = ClassLabel> {
    (0usize..4).prop_map(|i| ClassLabel::ALL[i])
}

fn instances(n: usize, count: usize) -> impl Strategy<Value = Vec<Instance>> {
    prop::collection::vec(
        (class(), 0f32..1.0, prop::collection::vec(any::<bool>(), n * n)),
        0..count,
    )
    .prop_map(move |v| v.into_iter().map(|(c, s, m)| Instance::from_mask(c, s, n, n, m)).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn focus_slicing_is_invertible(r in raster()) {
        let f = focus_slice(&r).unwrap();
        prop_assert_eq!((f.channels, f.height, f.width), (4 * r.channels, r.height / 2, r.width / 2));
        prop_assert_eq!(&unfocus_slice(&f).unwrap(), &r);

        let t = Tensor::from_vec(r.data.clone(), (1, r.channels, r.height, r.width), &Device::Cpu).unwrap();
        let ft = focus(&t).unwrap();
        prop_assert_eq!(ft.flatten_all().unwrap().to_vec1::<f32>().unwrap(), f.data.clone());
        let back = unfocus(&ft).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        prop_assert_eq!(back, r.data);
    }

    #[test]
    fn dice_follows_from_iou(
        pred in prop::collection::vec(any::<bool>(), 0..300),
        seed in any::<u64>(),
    ) {
        let gt: Vec<bool> = pred.iter().enumerate().map(|(i, &p)| p ^ ((seed >> (i % 64)) & 1 == 1)).collect();
        let (i, d) = (iou(&pred, &gt).unwrap(), dice(&pred, &gt).unwrap());
        prop_assert!((d - 2.0 * i / (1.0 + i)).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&i) && i <= d);
    }

    #[test]
    fn confusion_columns_are_distributions(pred in semantic(6), gt in semantic(6)) {
        let cm = confusion_matrix(&[pred], &[gt]).unwrap();
        let m = cm.normalized();
        for col in 0..4 {
            let s: f64 = (0..4).map(|r| m[r][col]).sum();
            if cm.column_total(col) > 0 {
                prop_assert!((s - 1.0).abs() <= 1e-6);
            } else {
                prop_assert_eq!(s, 0.0);
            }
        }
    }

    #[test]
    fn map_ignores_monotone_score_changes(
        preds in prop::collection::vec(instances(4, 6), 1..4),
        gts in prop::collection::vec(instances(4, 4), 1..4),
    ) {
        let k = preds.len().min(gts.len());
        let (preds, gts) = (&preds[..k], &gts[..k]);
        let warped: Vec<Vec<Instance>> = preds
            .iter()
            .map(|p| {
                p.iter()
                    .map(|i| Instance { score: (3.0 * i.score).exp() - 0.5, ..i.clone() })
                    .collect()
            })
            .collect();
        prop_assert_eq!(map50(preds, gts), map50(&warped, gts));
    }

    #[test]
    fn geometric_augmentation_moves_labels_with_pixels(
        g in geometric(),
        sem in semantic(7),
        data in prop::collection::vec(0f32..1.0, 2 * 49),
        inst in prop::collection::vec(any::<bool>(), 49),
    ) {
        let n = 7;
        let sample = Sample {
            id: "p".into(),
            image: Raster::new(2, n, n, data).unwrap(),
            semantic: sem,
            instances: vec![(ClassLabel::Tipburn, inst.clone())],
        };
        let out = apply_geometric(&sample, g);
        for y in 0..n {
            for x in 0..n {
                let p = y * n + x;
                match g.source_of(y, x, n) {
                    Some((sy, sx)) => {
                        let q = sy * n + sx;
                        prop_assert_eq!(out.semantic.labels[p], sample.semantic.labels[q]);
                        prop_assert_eq!(out.image.get(1, y, x), sample.image.get(1, sy, sx));
                        if let Some((_, m)) = out.instances.first() {
                            prop_assert_eq!(m[p], inst[q]);
                        }
                    }
                    None => prop_assert_eq!(out.semantic.labels[p], BACKGROUND),
                }
            }
        }
    }

    #[test]
    fn labelme_round_trips(
        polys in prop::collection::vec(
            (class(), prop::collection::vec((0.0f64..64.0, 0.0f64..48.0), 3..9)),
            0..6,
        ),
    ) {
        let mut ann = AnnotationSet::new("plate_0042", 48, 64);
        for (c, pts) in polys {
            ann.polygons.push(PolygonAnnotation::new(c, pts).unwrap());
        }
        let doc = ann.to_labelme("../images/plate_0042.tif");
        prop_assert_eq!(parse_labelme(&doc, None).unwrap(), ann);
    }

    #[test]
    fn split_is_a_seeded_partition(n in 2usize..400, frac in 0.0f64..0.9, seed in any::<u64>()) {
        let ids: Vec<String> = (0..n).map(|i| format!("s{i}")).collect();
        let s = split_dataset(&ids, frac, seed).unwrap();
        prop_assert_eq!(s.val_ids.len(), (frac * n as f64).round() as usize);
        let mut all: Vec<String> = s.train_ids.iter().chain(&s.val_ids).cloned().collect();
        all.sort();
        let mut want = ids.clone();
        want.sort();
        prop_assert_eq!(all, want);
        prop_assert_eq!(s, split_dataset(&ids, frac, seed).unwrap());
    }
}

#[test]
fn focus_of_a_known_block() {
    // One 2x2 block per band: parities land in channel groups 0..3.
    let t = Tensor::new(&[[[[1f32, 2.], [3., 4.]], [[5., 6.], [7., 8.]]]], &Device::Cpu).unwrap();
    let f = focus(&t).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
    assert_eq!(f, [1., 5., 2., 6., 3., 7., 4., 8.]);
    assert_eq!(t.dtype(), DType::F32);
}
