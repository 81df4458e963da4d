//! Multi-faceted hierarchical quantization.
//!
//! An embedding is projected by a learned matrix, cut into `M` contiguous
//! subspaces, and each subspace is residual-quantized through `L` codebooks
//! of `K` centroids. The item's semantic code is the `M·L` chosen indices,
//! subspace-major. Codebooks are maintained by exponential moving averages;
//! only the projection is learned by gradient descent.

mod loss;
mod report;
mod snapshot;
mod train;

pub use loss::{losses, objective, MhqLosses, ObjectiveVars};
pub use report::{codebook_utilization, collision_report, CollisionReport};
pub use snapshot::{load_codebooks, load_codes, save_codebooks, save_codes, snapshot_bytes};
pub use train::{ema_update, train, train_from, train_observed, EpochLoss, MhqTrainLog};

use crate::data::EmbeddingTable;
use crate::error::{Error, Result};
use crate::numerics::{squared_distance, Matrix};

/// Laplace floor in `c = m / (N + ε)`.
pub const EMA_EPSILON: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct MhqConfig {
    /// Projected width `D`.
    pub dim: usize,
    pub subspaces: usize,
    pub levels: usize,
    pub codebook_size: usize,
    pub lambda_bal: f64,
    pub lambda_reg: f64,
    pub gamma: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for MhqConfig {
    fn default() -> Self {
        MhqConfig {
            dim: 512,
            subspaces: 32,
            levels: 2,
            codebook_size: 256,
            lambda_bal: 0.01,
            lambda_reg: 0.01,
            gamma: 0.99,
            lr: 0.001,
            epochs: 50,
            batch: 256,
            seed: 0,
        }
    }
}

impl MhqConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.subspaces == 0 || self.levels == 0 {
            return fail("subspaces and levels must be at least 1".into());
        }
        if self.dim == 0 || self.dim % self.subspaces != 0 {
            return fail(format!(
                "projected dim {} must be a positive multiple of subspaces {}",
                self.dim, self.subspaces
            ));
        }
        if self.codebook_size < 2 {
            return fail(format!("codebook size must be >= 2, got {}", self.codebook_size));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return fail(format!("EMA decay must lie in (0, 1), got {}", self.gamma));
        }
        if self.batch == 0 || self.epochs == 0 {
            return fail("batch and epochs must be positive".into());
        }
        if !(self.lr >= 0.0) || !(self.lambda_bal >= 0.0) || !(self.lambda_reg >= 0.0) {
            return fail("learning rate and loss weights must be non-negative".into());
        }
        Ok(())
    }

    pub fn sub_dim(&self) -> usize {
        self.dim / self.subspaces
    }
}

/// One level's centroids plus their EMA accumulators.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub centroids: Matrix,
    pub ema_count: Vec<f64>,
    pub ema_sum: Matrix,
}

impl Codebook {
    pub fn zeros(k: usize, sub_dim: usize) -> Self {
        Codebook {
            centroids: Matrix::zeros(k, sub_dim),
            ema_count: vec![0.0; k],
            ema_sum: Matrix::zeros(k, sub_dim),
        }
    }

    /// Codebook whose accumulators reproduce `centroids` exactly: `N = 1`,
    /// `m = c·(1 + ε)`.
    pub fn from_centroids(centroids: Matrix) -> Self {
        let k = centroids.rows();
        Codebook {
            ema_sum: centroids.scale(1.0 + EMA_EPSILON),
            ema_count: vec![1.0; k],
            centroids,
        }
    }

    pub fn size(&self) -> usize {
        self.centroids.rows()
    }

    /// Recomputes `c = m / (N + ε)` for every code.
    pub fn refresh_centroids(&mut self) {
        for k in 0..self.size() {
            let denom = self.ema_count[k] + EMA_EPSILON;
            for (c, m) in self
                .centroids
                .row_mut(k)
                .iter_mut()
                .zip(self.ema_sum.row(k))
            {
                *c = m / denom;
            }
        }
    }

    /// Index of the nearest centroid; ties go to the lowest index.
    pub fn nearest(&self, r: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (k, c) in self.centroids.row_iter().enumerate() {
            let d = squared_distance(r, c);
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best
    }
}

/// Projection plus `M·L` codebooks, indexed subspace-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CodebookSet {
    pub projection: Matrix,
    pub subspaces: usize,
    pub levels: usize,
    pub books: Vec<Codebook>,
}

impl CodebookSet {
    pub fn new(projection: Matrix, subspaces: usize, levels: usize, books: Vec<Codebook>) -> Result<Self> {
        let dim = projection.rows();
        if subspaces == 0 || levels == 0 || dim % subspaces != 0 {
            return Err(Error::Config(format!(
                "projected dim {dim} not divisible into {subspaces} subspaces"
            )));
        }
        if books.len() != subspaces * levels {
            return Err(Error::Config(format!(
                "expected {} codebooks, got {}",
                subspaces * levels,
                books.len()
            )));
        }
        let sub = dim / subspaces;
        let k = books.first().map_or(0, Codebook::size);
        for b in &books {
            if b.centroids.shape() != (k, sub)
                || b.ema_sum.shape() != (k, sub)
                || b.ema_count.len() != k
            {
                return Err(Error::Config("inconsistent codebook shapes".into()));
            }
        }
        Ok(CodebookSet {
            projection,
            subspaces,
            levels,
            books,
        })
    }

    /// Zeroed codebooks around a given projection.
    pub fn empty(projection: Matrix, subspaces: usize, levels: usize, k: usize) -> Result<Self> {
        let sub = projection.rows() / subspaces.max(1);
        let books = (0..subspaces * levels).map(|_| Codebook::zeros(k, sub)).collect();
        CodebookSet::new(projection, subspaces, levels, books)
    }

    /// Projected width `D`.
    pub fn dim(&self) -> usize {
        self.projection.rows()
    }

    /// Input embedding width `d`.
    pub fn input_dim(&self) -> usize {
        self.projection.cols()
    }

    pub fn sub_dim(&self) -> usize {
        self.dim() / self.subspaces
    }

    pub fn codebook_size(&self) -> usize {
        self.books.first().map_or(0, Codebook::size)
    }

    pub fn code_len(&self) -> usize {
        self.subspaces * self.levels
    }

    pub fn book(&self, m: usize, l: usize) -> &Codebook {
        &self.books[m * self.levels + l]
    }

    pub fn book_mut(&mut self, m: usize, l: usize) -> &mut Codebook {
        &mut self.books[m * self.levels + l]
    }
}

/// Flattened code indices, subspace-major then level.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SemanticCode(pub Vec<usize>);

impl SemanticCode {
    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Result of residual-quantizing one subspace vector.
#[derive(Clone, Debug, PartialEq)]
pub struct SubspaceQuantization {
    pub indices: Vec<usize>,
    pub reconstruction: Vec<f64>,
    /// `L + 1` entries: the input, then the residual after each level.
    pub residuals: Vec<Vec<f64>>,
}

/// `W_P · x`.
pub fn project(cb: &CodebookSet, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != cb.input_dim() {
        return Err(Error::dim(
            "project",
            format!("embedding of length {} for projection {:?}", x.len(), cb.projection.shape()),
        ));
    }
    Ok(cb
        .projection
        .row_iter()
        .map(|w| crate::numerics::dot(w, x))
        .collect())
}

/// Contiguous equal slices of `v`.
pub fn split_subspaces(v: &[f64], m: usize) -> Result<Vec<Vec<f64>>> {
    if m == 0 || v.len() % m != 0 {
        return Err(Error::dim(
            "split_subspaces",
            format!("length {} not divisible by {m}", v.len()),
        ));
    }
    Ok(v.chunks_exact(v.len() / m).map(<[f64]>::to_vec).collect())
}

/// Greedy residual quantization of subspace `m`.
pub fn quantize_subspace(cb: &CodebookSet, m: usize, z: &[f64]) -> Result<SubspaceQuantization> {
    if z.len() != cb.sub_dim() {
        return Err(Error::dim(
            "quantize_subspace",
            format!("vector of length {} for sub-dim {}", z.len(), cb.sub_dim()),
        ));
    }
    let mut residual = z.to_vec();
    let mut reconstruction = vec![0.0; z.len()];
    let mut indices = Vec::with_capacity(cb.levels);
    let mut residuals = Vec::with_capacity(cb.levels + 1);
    residuals.push(residual.clone());
    for l in 0..cb.levels {
        let book = cb.book(m, l);
        let k = book.nearest(&residual);
        let c = book.centroids.row(k);
        for ((r, h), ci) in residual.iter_mut().zip(reconstruction.iter_mut()).zip(c) {
            *r -= ci;
            *h += ci;
        }
        indices.push(k);
        residuals.push(residual.clone());
    }
    Ok(SubspaceQuantization {
        indices,
        reconstruction,
        residuals,
    })
}

/// Project, split and quantize every subspace of one embedding.
pub fn assign_code(cb: &CodebookSet, x: &[f64]) -> Result<SemanticCode> {
    let tilde = project(cb, x)?;
    let mut code = Vec::with_capacity(cb.code_len());
    for (m, z) in split_subspaces(&tilde, cb.subspaces)?.iter().enumerate() {
        code.extend(quantize_subspace(cb, m, z)?.indices);
    }
    Ok(SemanticCode(code))
}

/// Codes for every row of a table.
pub fn assign_all(cb: &CodebookSet, table: &EmbeddingTable) -> Result<Vec<SemanticCode>> {
    (0..table.n_items())
        .map(|i| assign_code(cb, table.row(i)))
        .collect()
}

/// Sum of the chosen centroids for a code, concatenated across subspaces.
pub fn reconstruct(cb: &CodebookSet, code: &SemanticCode) -> Vec<f64> {
    let sub = cb.sub_dim();
    let mut out = vec![0.0; cb.dim()];
    for m in 0..cb.subspaces {
        for l in 0..cb.levels {
            let c = cb.book(m, l).centroids.row(code.0[m * cb.levels + l]);
            for (o, v) in out[m * sub..(m + 1) * sub].iter_mut().zip(c) {
                *o += v;
            }
        }
    }
    out
}

/// Batch forward pass used by training and loss evaluation.
pub(crate) struct BatchQuantization {
    pub reconstruction: Matrix,
    /// Per codebook (subspace-major): chosen index for every batch row.
    pub assignments: Vec<Vec<usize>>,
    /// Per codebook: the residual fed into that level, one row per batch item.
    pub level_inputs: Vec<Matrix>,
}

pub(crate) fn quantize_batch(cb: &CodebookSet, x: &Matrix) -> BatchQuantization {
    let tilde = x.matmul_nt(&cb.projection).expect("embedding width matches projection");
    let (b, sub) = (x.rows(), cb.sub_dim());
    let mut reconstruction = Matrix::zeros(b, cb.dim());
    let mut assignments = vec![Vec::with_capacity(b); cb.code_len()];
    let mut level_inputs = vec![Matrix::zeros(b, sub); cb.code_len()];
    for row in 0..b {
        for m in 0..cb.subspaces {
            let mut residual = tilde.row(row)[m * sub..(m + 1) * sub].to_vec();
            for l in 0..cb.levels {
                let idx = m * cb.levels + l;
                level_inputs[idx].row_mut(row).copy_from_slice(&residual);
                let book = &cb.books[idx];
                let k = book.nearest(&residual);
                assignments[idx].push(k);
                let c = book.centroids.row(k);
                let rec = &mut reconstruction.row_mut(row)[m * sub..(m + 1) * sub];
                for ((r, h), ci) in residual.iter_mut().zip(rec.iter_mut()).zip(c) {
                    *r -= ci;
                    *h += ci;
                }
            }
        }
    }
    BatchQuantization {
        reconstruction,
        assignments,
        level_inputs,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_point_set() -> CodebookSet {
        let c = Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap();
        CodebookSet::new(Matrix::identity(2), 1, 1, vec![Codebook::from_centroids(c)]).unwrap()
    }

    #[test]
    fn nearest_of_two() {
        let q = quantize_subspace(&two_point_set(), 0, &[0.9, 0.9]).unwrap();
        assert_eq!(q.indices, vec![1]);
        assert_eq!(q.reconstruction, vec![1.0, 1.0]);
        assert_eq!(q.residuals.len(), 2);
        assert_eq!(q.residuals[0], vec![0.9, 0.9]);
    }

    #[test]
    fn ties_pick_lowest_index() {
        let q = quantize_subspace(&two_point_set(), 0, &[0.5, 0.5]).unwrap();
        assert_eq!(q.indices, vec![0]);
    }

    #[test]
    fn exact_hit_leaves_zero_residual_for_later_levels() {
        let l1 = Matrix::from_rows(&[vec![2.0, -1.0], vec![0.5, 0.5]]).unwrap();
        let l2 = Matrix::from_rows(&[vec![0.3, 0.3], vec![0.0, 0.0], vec![-1.0, 0.2]]).unwrap();
        let l3 = Matrix::from_rows(&[vec![0.1, 0.0], vec![0.0, 0.4], vec![0.0, 0.0]]).unwrap();
        let mut books = vec![
            Codebook::from_centroids(l1),
            Codebook::from_centroids(l2),
            Codebook::from_centroids(l3),
        ];
        // pad to equal K
        for b in &mut books {
            while b.size() < 3 {
                let mut rows: Vec<Vec<f64>> = b.centroids.row_iter().map(<[f64]>::to_vec).collect();
                rows.push(vec![9.0, 9.0]);
                *b = Codebook::from_centroids(Matrix::from_rows(&rows).unwrap());
            }
        }
        let cb = CodebookSet::new(Matrix::identity(2), 1, 3, books).unwrap();
        let q = quantize_subspace(&cb, 0, &[2.0, -1.0]).unwrap();
        assert_eq!(q.indices, vec![0, 1, 2]);
        assert_eq!(q.residuals[1], vec![0.0, 0.0]);
        assert_eq!(q.residuals[3], vec![0.0, 0.0]);
    }

    #[test]
    fn split_examples() {
        assert_eq!(
            split_subspaces(&[1.0, 2.0, 3.0, 4.0], 2).unwrap(),
            vec![vec![1.0, 2.0], vec![3.0, 4.0]]
        );
        assert_eq!(split_subspaces(&[1.0, 2.0, 3.0], 1).unwrap(), vec![vec![1.0, 2.0, 3.0]]);
        assert!(split_subspaces(&[1.0, 2.0, 3.0], 2).is_err());
    }

    #[test]
    fn projection_identity_and_zero() {
        let cb = CodebookSet::empty(Matrix::identity(3), 1, 1, 2).unwrap();
        assert_eq!(project(&cb, &[1.0, -2.0, 0.5]).unwrap(), vec![1.0, -2.0, 0.5]);
        let cb = CodebookSet::empty(Matrix::zeros(2, 3), 1, 1, 2).unwrap();
        assert_eq!(project(&cb, &[1.0, -2.0, 0.5]).unwrap(), vec![0.0, 0.0]);
        assert!(project(&cb, &[1.0]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(MhqConfig::default().validate().is_ok());
        let bad = MhqConfig { dim: 10, subspaces: 3, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = MhqConfig { gamma: 1.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = MhqConfig { codebook_size: 1, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
