use lowshot::data::ClassHierarchy;
use lowshot::experiment::metrics::{compute_metrics, MetricsError};
use proptest::prelude::*;

#[test]
fn perfect_predictions() {
    let h = ClassHierarchy::stages();
    let truth: Vec<usize> = (0..28).map(|i| i % 14).collect();
    let m = compute_metrics(&truth, &truth, &h).unwrap();
    assert_eq!(m.average, 1.0);
    assert_eq!(m.total_escapes(), 0);
    for (i, row) in m.confusion.iter().enumerate() {
        assert_eq!(row[i], 2);
        assert_eq!(row.iter().sum::<usize>(), 2);
    }
}

#[test]
fn everything_predicted_as_the_first_class() {
    let h = ClassHierarchy::from_counts(&[2, 2]).unwrap();
    let truth = [0, 0, 1, 2, 3, 3];
    let m = compute_metrics(&[0; 6], &truth, &h).unwrap();
    assert_eq!(m.confusion.iter().map(|r| r[0]).collect::<Vec<_>>(), [2, 1, 1, 2]);
    assert!((m.average - 2.0 / 6.0).abs() < 1e-15);
    assert_eq!(m.per_class[0], Some(1.0));
    assert_eq!(m.per_class[3], Some(0.0));
}

#[test]
fn neighbour_error_stays_inside_the_range() {
    // Fine classes 0 and 1 share coarse 0, class 2 is alone under coarse 1.
    let h = ClassHierarchy::from_counts(&[2, 1]).unwrap();
    let truth = [0, 1, 2, 0];
    let pred = [0, 0, 2, 2];
    let m = compute_metrics(&pred, &truth, &h).unwrap();
    assert_eq!(m.total_escapes(), 1);
    assert_eq!(m.escapes, [1, 0]);
    assert!(m.total_escapes() <= m.total() - m.correct());
    assert_eq!(m.per_class, [Some(0.5), Some(0.0), Some(1.0)]);
}

#[test]
fn errors() {
    let h = ClassHierarchy::from_counts(&[2]).unwrap();
    assert!(matches!(compute_metrics(&[0], &[0, 1], &h), Err(MetricsError::LengthMismatch { .. })));
    assert!(matches!(compute_metrics(&[5], &[0], &h), Err(MetricsError::LabelOutOfRange { .. })));
}

#[test]
fn confusion_csv_layout() {
    let h = ClassHierarchy::from_counts(&[2]).unwrap();
    let m = compute_metrics(&[0, 1, 1], &[0, 0, 1], &h).unwrap();
    assert_eq!(m.confusion_csv(&h), "true\\predicted,1,2\n1,1,1\n2,0,1\n");
}

proptest! {
    #[test]
    fn identities(pairs in prop::collection::vec((0usize..14, 0usize..14), 1..200)) {
        let h = ClassHierarchy::stages();
        let (pred, truth): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let m = compute_metrics(&pred, &truth, &h).unwrap();
        for (c, row) in m.confusion.iter().enumerate() {
            prop_assert_eq!(row.iter().sum::<usize>(), truth.iter().filter(|&&t| t == c).count());
        }
        let trace: usize = (0..14).map(|i| m.confusion[i][i]).sum();
        prop_assert_eq!(m.average, trace as f64 / truth.len() as f64);
        prop_assert!(m.total_escapes() <= m.total() - m.correct());
    }
}
