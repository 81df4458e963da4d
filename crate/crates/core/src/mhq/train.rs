use log::{debug, info};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{objective, quantize_batch, Codebook, CodebookSet, MhqConfig, EMA_EPSILON};
use crate::data::EmbeddingTable;
use crate::error::{Error, Result};
use crate::numerics::{GradientTape, Matrix};

/// Mean losses over one epoch, weighted by batch size.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub rec: f64,
    pub bal: f64,
    pub reg: f64,
    pub total: f64,
    /// Codes reseeded at the end of this epoch.
    pub reseeded: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MhqTrainLog {
    pub epochs: Vec<EpochLoss>,
}

/// One EMA step for every codebook.
///
/// `assignments[b]` holds the chosen code per batch row for codebook `b`
/// (subspace-major), and `inputs[b]` the residual rows fed into that level.
pub fn ema_update(
    cb: &mut CodebookSet,
    gamma: f64,
    assignments: &[Vec<usize>],
    inputs: &[Matrix],
) -> Result<()> {
    if assignments.len() != cb.books.len() || inputs.len() != cb.books.len() {
        return Err(Error::dim(
            "ema_update",
            format!(
                "{} assignment lists and {} inputs for {} codebooks",
                assignments.len(),
                inputs.len(),
                cb.books.len()
            ),
        ));
    }
    for ((book, a), r) in cb.books.iter_mut().zip(assignments).zip(inputs) {
        book.ema_step(gamma, a, r)?;
    }
    Ok(())
}

impl Codebook {
    /// `N ← γN + (1−γ)·count`, `m ← γm + (1−γ)·Σr`, then `c = m/(N+ε)`.
    pub fn ema_step(&mut self, gamma: f64, assignments: &[usize], residuals: &Matrix) -> Result<()> {
        let k = self.size();
        if assignments.len() != residuals.rows() || residuals.cols() != self.centroids.cols() {
            return Err(Error::dim(
                "ema_step",
                format!(
                    "{} assignments, residuals {:?}, centroids {:?}",
                    assignments.len(),
                    residuals.shape(),
                    self.centroids.shape()
                ),
            ));
        }
        if let Some(&bad) = assignments.iter().find(|&&a| a >= k) {
            return Err(Error::dim("ema_step", format!("code {bad} out of range for K={k}")));
        }
        let mut count = vec![0.0; k];
        let mut sum = Matrix::zeros(k, self.centroids.cols());
        for (&a, r) in assignments.iter().zip(residuals.row_iter()) {
            count[a] += 1.0;
            for (s, v) in sum.row_mut(a).iter_mut().zip(r) {
                *s += v;
            }
        }
        for (n, c) in self.ema_count.iter_mut().zip(&count) {
            *n = gamma * *n + (1.0 - gamma) * c;
        }
        for (m, s) in self.ema_sum.data_mut().iter_mut().zip(sum.data()) {
            *m = gamma * *m + (1.0 - gamma) * s;
        }
        self.refresh_centroids();
        Ok(())
    }

    fn reseed(&mut self, k: usize, r: &[f64]) {
        self.ema_count[k] = 1.0;
        self.ema_sum.row_mut(k).copy_from_slice(r);
        let denom = 1.0 + EMA_EPSILON;
        for (c, v) in self.centroids.row_mut(k).iter_mut().zip(r) {
            *c = v / denom;
        }
    }
}

/// Random matrix with orthonormal rows (or columns when `rows > cols`).
fn orthonormal(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    let (r, c) = if rows <= cols { (rows, cols) } else { (cols, rows) };
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(r);
    while basis.len() < r {
        let mut v: Vec<f64> = (0..c).map(|_| rng.sample(StandardNormal)).collect();
        for b in &basis {
            let p = crate::numerics::dot(&v, b);
            for (x, y) in v.iter_mut().zip(b) {
                *x -= p * y;
            }
        }
        let n = crate::numerics::norm(&v);
        if n > 1e-8 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    let m = Matrix::from_rows(&basis).expect("finite basis");
    if rows <= cols {
        m
    } else {
        m.transpose()
    }
}

/// Seeds every codebook with K distinct residuals from the stream at its level,
/// level by level; short streams are padded with small Gaussian noise.
fn init_from_stream(cb: &mut CodebookSet, table: &EmbeddingTable, rng: &mut ChaCha8Rng) {
    let n = table.n_items();
    let k = cb.codebook_size();
    let sub = cb.sub_dim();
    for l in 0..cb.levels {
        let q = quantize_batch(cb, table.matrix());
        let picks: Vec<usize> = if n >= k {
            index::sample(rng, n, k).into_vec()
        } else {
            let mut all: Vec<usize> = (0..n).collect();
            all.shuffle(rng);
            all
        };
        for m in 0..cb.subspaces {
            let idx = m * cb.levels + l;
            let stream = &q.level_inputs[idx];
            let mut rows: Vec<Vec<f64>> = picks.iter().map(|&i| stream.row(i).to_vec()).collect();
            while rows.len() < k {
                rows.push((0..sub).map(|_| 0.01 * rng.sample::<f64, _>(StandardNormal)).collect());
            }
            cb.books[idx] = Codebook::from_centroids(Matrix::from_rows(&rows).expect("finite residuals"));
        }
    }
}

/// Trains projection and codebooks from scratch.
pub fn train(cfg: &MhqConfig, table: &EmbeddingTable) -> Result<(CodebookSet, MhqTrainLog)> {
    train_observed(cfg, table, |_, _, _| {})
}

/// Like [`train`], calling `observe(epoch, step, codebooks)` after every
/// optimizer step.
pub fn train_observed(
    cfg: &MhqConfig,
    table: &EmbeddingTable,
    mut observe: impl FnMut(usize, usize, &CodebookSet),
) -> Result<(CodebookSet, MhqTrainLog)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let w = orthonormal(&mut rng, cfg.dim, table.dim());
    let mut cb = CodebookSet::empty(w, cfg.subspaces, cfg.levels, cfg.codebook_size)?;
    init_from_stream(&mut cb, table, &mut rng);
    run(cfg, table, cb, &mut rng, &mut observe)
}

/// Continues training from existing codebooks without re-initializing them.
pub fn train_from(
    cfg: &MhqConfig,
    table: &EmbeddingTable,
    initial: CodebookSet,
) -> Result<(CodebookSet, MhqTrainLog)> {
    cfg.validate()?;
    if initial.dim() != cfg.dim
        || initial.subspaces != cfg.subspaces
        || initial.levels != cfg.levels
        || initial.codebook_size() != cfg.codebook_size
    {
        return Err(Error::Config("initial codebooks do not match the config".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    run(cfg, table, initial, &mut rng, &mut |_, _, _| {})
}

fn run(
    cfg: &MhqConfig,
    table: &EmbeddingTable,
    mut cb: CodebookSet,
    rng: &mut ChaCha8Rng,
    observe: &mut dyn FnMut(usize, usize, &CodebookSet),
) -> Result<(CodebookSet, MhqTrainLog)> {
    if table.dim() != cb.input_dim() {
        return Err(Error::dim(
            "mhq::train",
            format!("embedding dim {} but projection expects {}", table.dim(), cb.input_dim()),
        ));
    }
    let n = table.n_items();
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = MhqTrainLog::default();
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let mut acc = [0.0f64; 4];
        for (step, chunk) in order.chunks(cfg.batch).enumerate() {
            let x = table.matrix().select_rows(chunk);
            let q = quantize_batch(&cb, &x);
            let mut tape = GradientTape::new();
            let w = tape.param(&cb.projection);
            let v = objective(
                &mut tape,
                w,
                &x,
                &q.reconstruction,
                cb.subspaces,
                cfg.lambda_bal,
                cfg.lambda_reg,
            );
            let total = tape.value(v.total).item();
            if !total.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    detail: format!("quantization loss is {total}"),
                });
            }
            let vals = [
                tape.value(v.rec).item(),
                tape.value(v.bal).item(),
                tape.value(v.reg).item(),
                total,
            ];
            for (a, v) in acc.iter_mut().zip(vals) {
                *a += v * chunk.len() as f64;
            }
            let g = tape.backward(v.total)?.wrt(w);
            if !g.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    detail: "non-finite projection gradient".into(),
                });
            }
            for (p, d) in cb.projection.data_mut().iter_mut().zip(g.data()) {
                *p -= cfg.lr * d;
            }
            ema_update(&mut cb, cfg.gamma, &q.assignments, &q.level_inputs)?;
            observe(epoch, step, &cb);
        }
        let reseeded = reseed_dead_codes(&mut cb, table, cfg.batch, rng);
        let e = EpochLoss {
            epoch,
            rec: acc[0] / n as f64,
            bal: acc[1] / n as f64,
            reg: acc[2] / n as f64,
            total: acc[3] / n as f64,
            reseeded,
        };
        info!(
            "mhq epoch {epoch}: rec {:.6} bal {:.6} reg {:.6} total {:.6} reseeded {reseeded}",
            e.rec, e.bal, e.reg, e.total
        );
        log.epochs.push(e);
    }
    Ok((cb, log))
}

/// Resets codes whose EMA mass fell below 1% of the uniform share `B/K`.
fn reseed_dead_codes(cb: &mut CodebookSet, table: &EmbeddingTable, batch: usize, rng: &mut ChaCha8Rng) -> usize {
    let k = cb.codebook_size();
    let threshold = 0.01 * batch.min(table.n_items()) as f64 / k as f64;
    let dead_any = cb
        .books
        .iter()
        .any(|b| b.ema_count.iter().any(|&c| c < threshold));
    if !dead_any {
        return 0;
    }
    let q = quantize_batch(cb, table.matrix());
    let n = table.n_items();
    let mut total = 0;
    for (idx, book) in cb.books.iter_mut().enumerate() {
        for code in 0..k {
            if book.ema_count[code] < threshold {
                let row = rng.random_range(0..n);
                book.reseed(code, q.level_inputs[idx].row(row));
                total += 1;
            }
        }
    }
    debug!("reseeded {total} dead codes");
    total
}
