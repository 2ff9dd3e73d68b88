mod common;

use std::fs;

use lowshot::data::{
    decode_pgm, encode_pgm, load_manifest, split_train_test, synth_generate, write_dataset, ClassHierarchy, DataError,
    Dataset, Image, SplitSpec, SynthParams,
};
use lowshot::gabor::{train_linear_classifier, LinearConfig};
use proptest::prelude::*;

#[test]
fn pgm_header_and_raster() {
    let img = Image::new(2, 3, vec![0.0, 0.5, 1.0, 0.25, 0.75, 0.1]).unwrap();
    let bytes = encode_pgm(&img);
    assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
    assert_eq!(&bytes[bytes.len() - 6..], &[0, 128, 255, 64, 191, 26]);
    let back = decode_pgm(&bytes).unwrap();
    assert_eq!((back.height(), back.width()), (2, 3));
    assert_eq!(back.pixels()[2], 1.0);
}

#[test]
fn pgm_with_comment_and_odd_whitespace() {
    let mut bytes = b"P5 # made by hand\n2\t1 255\n".to_vec();
    bytes.extend([10, 200]);
    let img = decode_pgm(&bytes).unwrap();
    assert_eq!(img.pixels(), &[10.0 / 255.0, 200.0 / 255.0]);
}

proptest! {
    #[test]
    fn pgm_bytes_round_trip(h in 1usize..6, w in 1usize..6, seed in any::<u8>()) {
        let px: Vec<f32> = (0..h * w).map(|i| ((i * 37 + seed as usize) % 256) as f32 / 255.0).collect();
        let img = Image::new(h, w, px).unwrap();
        let again = encode_pgm(&decode_pgm(&encode_pgm(&img)).unwrap());
        prop_assert_eq!(again, encode_pgm(&img));
    }
}

fn write_tree(dir: &std::path::Path, rows: &[(&str, &str, &str)]) -> std::path::PathBuf {
    let img = Image::new(2, 2, vec![0.5; 4]).unwrap();
    let mut text = String::from("path,coarse,fine\n");
    for (p, c, f) in rows {
        let file = dir.join(p);
        fs::create_dir_all(file.parent().unwrap()).unwrap();
        fs::write(&file, encode_pgm(&img)).unwrap();
        text.push_str(&format!("{p},{c},{f}\n"));
    }
    let manifest = dir.join("manifest.csv");
    fs::write(&manifest, text).unwrap();
    manifest
}

#[test]
fn manifest_is_checked_against_the_hierarchy() {
    let tmp = tempfile::tempdir().unwrap();
    let h = ClassHierarchy::from_counts(&[2, 1]).unwrap();
    let good = write_tree(tmp.path(), &[("a.pgm", "1", "2"), ("b.pgm", "2", ""), ("c.pgm", "2", "3")]);
    let d = load_manifest(&good, &h).unwrap();
    assert_eq!(d.len(), 3);
    assert_eq!(d.samples()[1].fine, None);
    assert_eq!(d.samples()[2].fine, Some(2));

    let bad = write_tree(tmp.path(), &[("a.pgm", "2", "1")]);
    let e = load_manifest(&bad, &h).unwrap_err();
    assert!(matches!(e, DataError::HierarchyViolation { fine: 1, coarse: 2, expected: 1 }), "{e:?}");
}

#[test]
fn manifest_with_missing_image() {
    let tmp = tempfile::tempdir().unwrap();
    let h = ClassHierarchy::from_counts(&[1, 2]).unwrap();
    let manifest = write_tree(tmp.path(), &[("a.pgm", "1", "1")]);
    fs::write(&manifest, "path,coarse,fine\na.pgm,1,1\ngone.pgm,2,2\n").unwrap();
    assert!(matches!(load_manifest(&manifest, &h), Err(DataError::MissingFile(p)) if p.ends_with("gone.pgm")));
}

#[test]
fn written_tree_loads_back() {
    let tmp = tempfile::tempdir().unwrap();
    let (d_t, d_s) = common::small_synth(12, 56, 2);
    let manifest = write_dataset(tmp.path(), &[&d_t, &d_s]).unwrap();
    let back = load_manifest(&manifest, d_t.hierarchy()).unwrap();
    assert_eq!(back.len(), 68);
    assert!(tmp.path().join("coarse_1/fine_0").is_dir());
    let (_, fine) = back.partition_by_fine();
    assert_eq!(fine.len(), 56);
}

fn labelled(n: usize, classes: usize) -> Dataset {
    let h = ClassHierarchy::from_counts(&[classes + 1]).unwrap();
    let samples = (0..n)
        .map(|i| lowshot::data::LabeledSample {
            id: i,
            image: Image::new(1, 1, vec![0.0]).unwrap(),
            coarse: 0,
            fine: Some(i % classes),
        })
        .collect();
    Dataset::new(h, samples).unwrap()
}

#[test]
fn split_examples() {
    let d = labelled(10, 1);
    let (tr, te) = split_train_test(&d, &SplitSpec { stratify: false, ..SplitSpec::default() }).unwrap();
    assert_eq!((tr.len(), te.len()), (7, 3));

    let d = labelled(20, 2);
    let (tr, te) = split_train_test(&d, &SplitSpec::default()).unwrap();
    let per_class = |x: &Dataset, c| x.fine_labels().unwrap().iter().filter(|&&l| l == c).count();
    assert_eq!((per_class(&tr, 0), per_class(&tr, 1)), (7, 7));
    assert_eq!((per_class(&te, 0), per_class(&te, 1)), (3, 3));
}

proptest! {
    #[test]
    fn split_is_a_partition(n in 4usize..40, classes in 1usize..4, seed in any::<u64>(), stratify in any::<bool>()) {
        let d = labelled(n.max(2 * classes), classes);
        let (tr, te) = split_train_test(&d, &SplitSpec { seed, stratify, ..SplitSpec::default() }).unwrap();
        let mut ids: Vec<usize> = tr.samples().iter().chain(te.samples()).map(|s| s.id).collect();
        ids.sort();
        prop_assert_eq!(ids, (0..d.len()).collect::<Vec<_>>());
        prop_assert!(!te.is_empty());
    }
}

#[test]
fn stage_hierarchy() {
    let h = ClassHierarchy::stages();
    assert_eq!((h.num_coarse(), h.num_fine()), (6, 14));
    let sizes: Vec<usize> = (0..6).map(|c| h.fines_of(c).len()).collect();
    assert_eq!(sizes, [0, 3, 2, 2, 2, 5]);
    assert_eq!(h.fine_name(0), "4");
    assert_eq!(h.coarse_name(5), "13-17");
    assert_eq!(h.coarse_of(13), Some(5));
}

fn moments(images: impl Iterator<Item = Vec<f32>>) -> (f64, f64) {
    let (mut s, mut s2, mut n) = (0.0, 0.0, 0.0);
    for px in images {
        for v in px {
            s += v as f64;
            s2 += (v as f64).powi(2);
            n += 1.0;
        }
    }
    let mean = s / n;
    (mean, (s2 / n - mean * mean).sqrt())
}

#[test]
fn coarse_and_fine_sets_share_their_marginals() {
    let params = SynthParams { n_t: 1000, n_s: 1000, ..SynthParams::default() };
    let (d_t, d_s) = synth_generate(&params, &ClassHierarchy::stages()).unwrap();
    let of = |d: &Dataset, c: usize| {
        moments(d.samples().iter().filter(|s| s.coarse == c).map(|s| s.image.pixels().to_vec()))
    };
    for c in 1..6 {
        let (mt, st) = of(&d_t, c);
        let (ms, ss) = of(&d_s, c);
        assert!(((mt - ms) / ms).abs() < 0.05, "coarse {c}: mean {mt} vs {ms}");
        assert!(((st - ss) / ss).abs() < 0.05, "coarse {c}: std {st} vs {ss}");
    }
}

#[test]
fn generator_is_seeded() {
    let p = SynthParams { n_t: 12, n_s: 56, ..SynthParams::default() };
    let h = ClassHierarchy::stages();
    assert_eq!(synth_generate(&p, &h).unwrap(), synth_generate(&p, &h).unwrap());
    assert_ne!(synth_generate(&p, &h).unwrap().0, synth_generate(&SynthParams { seed: 1, ..p }, &h).unwrap().0);
}

fn pixel_accuracy(train: &Dataset, test: &Dataset, labels: impl Fn(&Dataset) -> Vec<usize>, classes: usize) -> f64 {
    let rows = |d: &Dataset| d.samples().iter().map(|s| s.image.pixels().iter().map(|&v| v as f64).collect()).collect::<Vec<Vec<f64>>>();
    let config = LinearConfig { epochs: 30, ..LinearConfig::default() };
    let clf = train_linear_classifier(&rows(train), &labels(train), classes, &config).unwrap();
    let truth = labels(test);
    let hits = rows(test).iter().zip(&truth).filter(|(x, &y)| clf.predict(x) == y).count();
    hits as f64 / truth.len() as f64
}

#[test]
fn raw_pixels_separate_coarse_but_not_fine_classes() {
    let h = ClassHierarchy::stages();
    let (d_t, d_s) = synth_generate(&SynthParams { n_t: 1200, ..SynthParams::default() }, &h).unwrap();
    let (tt, te) = split_train_test(&d_t, &SplitSpec { stratify: false, ..SplitSpec::default() }).unwrap();
    let coarse = pixel_accuracy(&tt, &te, |d| d.coarse_labels(), 6);
    let (st, se) = split_train_test(&d_s, &SplitSpec::default()).unwrap();
    let fine = pixel_accuracy(&st, &se, |d| d.fine_labels().unwrap(), 14);
    assert!(coarse >= 0.9, "coarse {coarse}");
    assert!(fine < 0.6, "fine {fine}");
}
