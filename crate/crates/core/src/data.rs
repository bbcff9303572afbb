//! Multimodal survival cases and task streams.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::survival::{compute_bins, BinSpec};

/// Number of functional genomic groups per case.
pub const N_GENOMIC_GROUPS: usize = 6;

/// Bag of patch feature vectors, `n_patches × dim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchBag {
    features: Tensor,
}

impl PatchBag {
    pub fn new(n_patches: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if n_patches == 0 {
            return Err(Error::Contract("patch bag is empty".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("patch features must be finite".into()));
        }
        Ok(PatchBag {
            features: Tensor::matrix(n_patches, dim, values)?,
        })
    }

    pub fn n_patches(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn patch(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }
}

/// Six genomic groups, each zero-padded to a shared width. The unpadded
/// group widths are kept so the profile can be written back losslessly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenomicProfile {
    dims: Vec<usize>,
    width: usize,
    /// Row-major `N_GENOMIC_GROUPS × width`.
    values: Vec<f64>,
}

impl GenomicProfile {
    /// Pads each group to `width` with zeros.
    pub fn new(groups: Vec<Vec<f64>>, width: usize) -> Result<Self> {
        if groups.len() != N_GENOMIC_GROUPS {
            return Err(Error::Contract(format!(
                "expected {N_GENOMIC_GROUPS} genomic groups, got {}",
                groups.len()
            )));
        }
        let mut values = Vec::with_capacity(N_GENOMIC_GROUPS * width);
        let mut dims = Vec::with_capacity(N_GENOMIC_GROUPS);
        for (i, g) in groups.iter().enumerate() {
            if g.len() > width {
                return Err(Error::Shape(format!(
                    "genomic group {i} has {} values, wider than {width}",
                    g.len()
                )));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("genomic group {i} has non-finite values")));
            }
            dims.push(g.len());
            values.extend_from_slice(g);
            values.extend(std::iter::repeat(0.0).take(width - g.len()));
        }
        if width == 0 {
            return Err(Error::Shape("genomic width is zero".into()));
        }
        Ok(GenomicProfile { dims, width, values })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Original (unpadded) group widths.
    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// Padded group `i`.
    pub fn group(&self, i: usize) -> &[f64] {
        &self.values[i * self.width..(i + 1) * self.width]
    }

    /// Unpadded values of group `i`.
    pub fn original(&self, i: usize) -> &[f64] {
        &self.group(i)[..self.dims[i]]
    }

    /// Re-pad to a wider common width.
    pub fn padded_to(&self, width: usize) -> Result<Self> {
        let groups = (0..N_GENOMIC_GROUPS).map(|i| self.original(i).to_vec()).collect();
        GenomicProfile::new(groups, width)
    }

    pub fn as_matrix(&self) -> Tensor {
        Tensor::matrix(N_GENOMIC_GROUPS, self.width, self.values.clone()).expect("valid genomic matrix")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub id: String,
    pub task: usize,
    /// Follow-up or death time.
    pub time: f64,
    pub censored: bool,
    /// Discrete bin of `time` under the task's [`BinSpec`].
    pub label: usize,
    pub patches: PatchBag,
    pub genomics: GenomicProfile,
}

/// One task's cases together with its own bin boundaries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskData {
    pub name: String,
    pub bins: BinSpec,
    pub cases: Vec<CaseRecord>,
}

impl TaskData {
    /// Derives the bins from this task's uncensored times and labels every case.
    pub fn new(name: impl Into<String>, mut cases: Vec<CaseRecord>, n_bins: usize) -> Result<Self> {
        let times: Vec<f64> = cases.iter().map(|c| c.time).collect();
        let censored: Vec<bool> = cases.iter().map(|c| c.censored).collect();
        let bins = compute_bins(&times, &censored, n_bins)?;
        for c in &mut cases {
            c.label = bins.assign(c.time);
        }
        Ok(TaskData {
            name: name.into(),
            bins,
            cases,
        })
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn times(&self, idx: &[usize]) -> Vec<f64> {
        idx.iter().map(|&i| self.cases[i].time).collect()
    }

    pub fn censored(&self, idx: &[usize]) -> Vec<bool> {
        idx.iter().map(|&i| self.cases[i].censored).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskStream {
    pub tasks: Vec<TaskData>,
}

impl TaskStream {
    pub fn new(tasks: Vec<TaskData>) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::Data("task stream has no tasks".into()));
        }
        let s = TaskStream { tasks };
        let (dp, gw) = (s.patch_dim(), s.genomic_width());
        for (k, t) in s.tasks.iter().enumerate() {
            if t.cases.is_empty() {
                return Err(Error::Data(format!("task {k} has no cases")));
            }
            for c in &t.cases {
                if c.patches.dim() != dp || c.genomics.width() != gw {
                    return Err(Error::Data(format!(
                        "case {} in task {k}: dims {}/{} differ from stream {dp}/{gw}",
                        c.id,
                        c.patches.dim(),
                        c.genomics.width()
                    )));
                }
                if c.task != k {
                    return Err(Error::Data(format!("case {} labelled task {} sits in task {k}", c.id, c.task)));
                }
            }
        }
        Ok(s)
    }

    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn patch_dim(&self) -> usize {
        self.tasks[0].cases[0].patches.dim()
    }

    pub fn genomic_width(&self) -> usize {
        self.tasks[0].cases[0].genomics.width()
    }

    pub fn n_bins(&self) -> usize {
        self.tasks[0].bins.n_bins()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn genomic_padding_preserves_values() {
        let groups: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64 + 1.0; i + 1]).collect();
        let g = GenomicProfile::new(groups.clone(), 10).unwrap();
        for (i, orig) in groups.iter().enumerate() {
            assert_eq!(g.original(i), orig.as_slice());
            assert_eq!(g.group(i).len(), 10);
            assert!(g.group(i)[orig.len()..].iter().all(|&v| v == 0.0));
        }
        let wider = g.padded_to(14).unwrap();
        assert_eq!(wider.width(), 14);
        assert_eq!(wider.original(5), groups[5].as_slice());
        assert!(GenomicProfile::new(groups[..5].to_vec(), 10).is_err());
    }

    #[test]
    fn empty_bag_rejected() {
        assert!(matches!(PatchBag::new(0, 4, vec![]), Err(Error::Contract(_))));
    }
}
