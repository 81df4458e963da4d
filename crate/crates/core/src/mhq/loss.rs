use super::{quantize_batch, CodebookSet};
use crate::error::{Error, Result};
use crate::numerics::{GradientTape, Matrix, Var};

/// Scalar loss values for one batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MhqLosses {
    pub rec: f64,
    pub bal: f64,
    pub reg: f64,
    pub total: f64,
}

/// Tape nodes of the objective; each is 1×1.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveVars {
    pub rec: Var,
    pub bal: Var,
    pub reg: Var,
    pub total: Var,
}

/// Builds the objective on `tape` for projection node `w` (D×d).
///
/// `zhat` (B×D) is a constant: codewords receive no gradient. The balance
/// term compares batch-mean subspace energies, written as `|E·C|` with a
/// fixed D×M matrix `C` so it stays a handful of tape ops.
pub fn objective(
    tape: &mut GradientTape,
    w: Var,
    x: &Matrix,
    zhat: &Matrix,
    subspaces: usize,
    lambda_bal: f64,
    lambda_reg: f64,
) -> ObjectiveVars {
    let (b, dim) = (x.rows(), tape.value(w).rows());
    let sub = dim / subspaces;
    let xv = tape.constant(x.clone());
    let tilde = tape.matmul_nt(xv, w);
    let zc = tape.constant(zhat.clone());
    let diff = tape.sub(tilde, zc);
    let sq = tape.sum_squares(diff);
    let rec = tape.scale(sq, 1.0 / b as f64);

    let squared = tape.mul(tilde, tilde);
    let ones = tape.constant(Matrix::filled(1, b, 1.0));
    let col_energy = tape.matmul(ones, squared);
    let mut centering = Matrix::zeros(dim, subspaces);
    let inv_m = 1.0 / subspaces as f64;
    for j in 0..dim {
        let own = j / sub;
        for m in 0..subspaces {
            let v = if m == own { 1.0 - inv_m } else { -inv_m };
            centering.set(j, m, v / b as f64);
        }
    }
    let cv = tape.constant(centering);
    let deviations = tape.matmul(col_energy, cv);
    let abs = tape.abs(deviations);
    let total_dev = tape.sum(abs);
    let bal = tape.scale(total_dev, inv_m);

    let gram = tape.matmul_nt(w, w);
    let eye = tape.constant(Matrix::identity(dim));
    let off = tape.sub(gram, eye);
    let fro2 = tape.sum_squares(off);
    let reg = tape.sqrt(fro2);

    let wb = tape.scale(bal, lambda_bal);
    let wr = tape.scale(reg, lambda_reg);
    let t = tape.add(rec, wb);
    let total = tape.add(t, wr);
    ObjectiveVars { rec, bal, reg, total }
}

/// Loss values for a batch under the current codebooks.
pub fn losses(cb: &CodebookSet, x: &Matrix, lambda_bal: f64, lambda_reg: f64) -> Result<MhqLosses> {
    if x.rows() == 0 {
        return Err(Error::Usage("losses need a non-empty batch".into()));
    }
    if x.cols() != cb.input_dim() {
        return Err(Error::dim(
            "losses",
            format!("batch width {} for projection {:?}", x.cols(), cb.projection.shape()),
        ));
    }
    let q = quantize_batch(cb, x);
    let mut tape = GradientTape::new();
    let w = tape.constant(cb.projection.clone());
    let v = objective(&mut tape, w, x, &q.reconstruction, cb.subspaces, lambda_bal, lambda_reg);
    Ok(MhqLosses {
        rec: tape.value(v.rec).item(),
        bal: tape.value(v.bal).item(),
        reg: tape.value(v.reg).item(),
        total: tape.value(v.total).item(),
    })
}
