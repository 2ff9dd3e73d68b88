//! Fine-to-coarse label hierarchy.

use std::fmt;

use super::DataError;

/// Maps every fine class onto one coarse class. Labels are zero-based;
/// names carry the human-facing numbering.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassHierarchy {
    coarse_names: Vec<String>,
    fine_names: Vec<String>,
    fine_to_coarse: Vec<usize>,
}

impl ClassHierarchy {
    pub fn new(coarse_names: Vec<String>, fine_names: Vec<String>, fine_to_coarse: Vec<usize>) -> Result<Self, DataError> {
        if fine_names.len() != fine_to_coarse.len() {
            return Err(DataError::InvalidHierarchy(format!(
                "{} fine names for {} fine classes",
                fine_names.len(),
                fine_to_coarse.len()
            )));
        }
        if coarse_names.is_empty() || coarse_names.len() >= fine_names.len() {
            return Err(DataError::InvalidHierarchy(format!(
                "need fewer coarse than fine classes, got {} and {}",
                coarse_names.len(),
                fine_names.len()
            )));
        }
        if let Some((f, &c)) = fine_to_coarse.iter().enumerate().find(|(_, &c)| c >= coarse_names.len()) {
            return Err(DataError::InvalidHierarchy(format!("fine class {} maps to missing coarse class {}", f + 1, c + 1)));
        }
        Ok(ClassHierarchy { coarse_names, fine_names, fine_to_coarse })
    }

    /// Builds a hierarchy from contiguous fine-class counts per coarse class,
    /// numbering names from 1.
    pub fn from_counts(fine_per_coarse: &[usize]) -> Result<Self, DataError> {
        let coarse_names = (1..=fine_per_coarse.len()).map(|i| i.to_string()).collect();
        let fine_to_coarse: Vec<usize> =
            fine_per_coarse.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat(c).take(n)).collect();
        let fine_names = (1..=fine_to_coarse.len()).map(|i| i.to_string()).collect();
        ClassHierarchy::new(coarse_names, fine_names, fine_to_coarse)
    }

    /// The developmental-stage layout: six stage ranges over fourteen
    /// precise stages, the first range carrying no precise labels.
    pub fn stages() -> Self {
        let ranges: [(&str, &[u32]); 6] = [
            ("1-3", &[]),
            ("4-6", &[4, 5, 6]),
            ("7-8", &[7, 8]),
            ("9-10", &[9, 10]),
            ("11-12", &[11, 12]),
            ("13-17", &[13, 14, 15, 16, 17]),
        ];
        let mut fine_names = Vec::new();
        let mut fine_to_coarse = Vec::new();
        for (c, (_, stages)) in ranges.iter().enumerate() {
            for s in stages.iter() {
                fine_names.push(s.to_string());
                fine_to_coarse.push(c);
            }
        }
        let coarse_names = ranges.iter().map(|(n, _)| n.to_string()).collect();
        ClassHierarchy::new(coarse_names, fine_names, fine_to_coarse).expect("stage table is consistent")
    }

    pub fn num_coarse(&self) -> usize {
        self.coarse_names.len()
    }

    pub fn num_fine(&self) -> usize {
        self.fine_names.len()
    }

    pub fn coarse_of(&self, fine: usize) -> Option<usize> {
        self.fine_to_coarse.get(fine).copied()
    }

    pub fn fines_of(&self, coarse: usize) -> Vec<usize> {
        (0..self.num_fine()).filter(|&f| self.fine_to_coarse[f] == coarse).collect()
    }

    pub fn coarse_name(&self, coarse: usize) -> &str {
        &self.coarse_names[coarse]
    }

    pub fn fine_name(&self, fine: usize) -> &str {
        &self.fine_names[fine]
    }

    pub fn fine_to_coarse(&self) -> &[usize] {
        &self.fine_to_coarse
    }

    /// Checks one label pair.
    pub fn validate(&self, coarse: usize, fine: Option<usize>) -> Result<(), DataError> {
        if coarse >= self.num_coarse() {
            return Err(DataError::LabelOutOfRange { label: coarse + 1, classes: self.num_coarse() });
        }
        if let Some(f) = fine {
            let expected = self.coarse_of(f).ok_or(DataError::LabelOutOfRange { label: f + 1, classes: self.num_fine() })?;
            if expected != coarse {
                return Err(DataError::HierarchyViolation { fine: f + 1, coarse: coarse + 1, expected: expected + 1 });
            }
        }
        Ok(())
    }
}

/// Per-range sample counts: all samples and the precisely labelled ones.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CountTable {
    pub rows: Vec<CountRow>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CountRow {
    pub coarse: String,
    pub total: usize,
    pub fine: Vec<(String, usize)>,
}

impl fmt::Display for CountTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<8} {:>7}  precise labels", "range", "images")?;
        for row in &self.rows {
            let fine: Vec<String> = row.fine.iter().map(|(n, c)| format!("{n}:{c}")).collect();
            writeln!(f, "{:<8} {:>7}  {}", row.coarse, row.total, fine.join(" "))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_table_shape() {
        let h = ClassHierarchy::stages();
        assert_eq!((h.num_coarse(), h.num_fine()), (6, 14));
        assert!(h.fines_of(0).is_empty());
        assert_eq!(h.fines_of(5).len(), 5);
        assert_eq!(h.fine_name(0), "4");
        assert_eq!(h.coarse_name(4), "11-12");
        assert_eq!(h.coarse_of(13), Some(5));
    }

    #[test]
    fn wrong_coarse_is_a_violation() {
        let h = ClassHierarchy::stages();
        assert!(h.validate(1, Some(0)).is_ok());
        assert!(matches!(h.validate(2, Some(0)), Err(DataError::HierarchyViolation { .. })));
    }

    #[test]
    fn coarse_must_be_fewer() {
        assert!(ClassHierarchy::from_counts(&[1, 1]).is_err());
        assert!(ClassHierarchy::from_counts(&[2, 1]).is_ok());
    }
}
