//! The sample-based carrier of every filtering distribution.

use nalgebra::DVector;

/// A collection of `K` state vectors of dimension `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    members: Vec<DVector<f64>>,
}

impl Ensemble {
    /// Wraps existing members. Panics if members are empty or ragged.
    pub fn new(members: Vec<DVector<f64>>) -> Self {
        assert!(!members.is_empty(), "ensemble needs at least one member");
        let d = members[0].len();
        assert!(
            members.iter().all(|m| m.len() == d),
            "ensemble members must share a dimension"
        );
        Ensemble { members }
    }

    pub fn from_fn(size: usize, mut f: impl FnMut(usize) -> DVector<f64>) -> Self {
        Ensemble::new((0..size).map(&mut f).collect())
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn dim(&self) -> usize {
        self.members[0].len()
    }

    pub fn members(&self) -> &[DVector<f64>] {
        &self.members
    }

    pub fn members_mut(&mut self) -> &mut [DVector<f64>] {
        &mut self.members
    }

    pub fn member(&self, k: usize) -> &DVector<f64> {
        &self.members[k]
    }

    pub fn mean(&self) -> DVector<f64> {
        let mut acc = DVector::zeros(self.dim());
        for m in &self.members {
            acc += m;
        }
        acc / self.size() as f64
    }

    pub fn iter(&self) -> std::slice::Iter<'_, DVector<f64>> {
        self.members.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.members.iter().all(|m| m.iter().all(|x| x.is_finite()))
    }
}

impl FromIterator<DVector<f64>> for Ensemble {
    fn from_iter<I: IntoIterator<Item = DVector<f64>>>(iter: I) -> Self {
        Ensemble::new(iter.into_iter().collect())
    }
}
