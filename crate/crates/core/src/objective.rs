//! Cosine similarity and the normalized temperature-scaled cross-entropy
//! (NT-Xent) loss over a batch of `2N` projections.
//!
//! For anchor `i` with positive `p(i)` and logits `s_ik = cos(z_i, z_k) / tau`:
//!
//! ```text
//! l_i = -s_ip(i) + log sum_{k != i} exp(s_ik)
//! L   = (1 / 2N) sum_i l_i
//! ```

use thiserror::Error;

use crate::numcore::{Graph, Scalar, Tensor, Var};

/// Rows with a smaller norm are rejected as degenerate.
pub const MIN_ROW_NORM: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum ObjectiveError {
    #[error("degenerate embedding: row {0} has near-zero norm")]
    DegenerateRow(usize),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("dimension error: {0}")]
    Shape(String),
}

pub type Result<T> = std::result::Result<T, ObjectiveError>;

/// Symmetric `[2N, 2N]` matrix of cosine similarities.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix<S> {
    size: usize,
    values: Vec<S>,
}

impl<S: Scalar> SimilarityMatrix<S> {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, i: usize, j: usize) -> S {
        self.values[i * self.size + j]
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }
}

/// Total loss and the per-anchor terms it averages.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue<S> {
    pub total: S,
    pub per_anchor: Vec<S>,
}

fn rows_of<S: Scalar>(z: &Tensor<S>) -> Result<(usize, usize)> {
    match z.shape() {
        [r, d] if *r > 0 && *d > 0 => Ok((*r, *d)),
        s => Err(ObjectiveError::Shape(format!("expected non-empty [2N, d], got {s:?}"))),
    }
}

/// Unit-normalized rows and the original norms.
fn normalize<S: Scalar>(z: &Tensor<S>) -> Result<(Vec<S>, Vec<S>)> {
    let (rows, d) = rows_of(z)?;
    let min = S::from_f64_lossy(MIN_ROW_NORM);
    let mut unit = Vec::with_capacity(rows * d);
    let mut norms = Vec::with_capacity(rows);
    for (i, row) in z.data().chunks(d).enumerate() {
        let norm = row.iter().map(|v| *v * *v).sum::<S>().sqrt();
        if !(norm > min) {
            return Err(ObjectiveError::DegenerateRow(i));
        }
        unit.extend(row.iter().map(|v| *v / norm));
        norms.push(norm);
    }
    Ok((unit, norms))
}

pub fn cosine_similarity_matrix<S: Scalar>(z: &Tensor<S>) -> Result<SimilarityMatrix<S>> {
    let (rows, d) = rows_of(z)?;
    let (unit, _) = normalize(z)?;
    let mut values = vec![S::zero(); rows * rows];
    S::gemm(rows, d, rows, &unit, false, &unit, true, S::zero(), &mut values);
    let data = z.data();
    for i in 0..rows {
        for j in i..rows {
            let v = if data[i * d..(i + 1) * d] == data[j * d..(j + 1) * d] {
                S::one()
            } else {
                values[i * rows + j].max(-S::one()).min(S::one())
            };
            values[i * rows + j] = v;
            values[j * rows + i] = v;
        }
    }
    Ok(SimilarityMatrix { size: rows, values })
}

/// Checks that `pair_of` is an involution without fixed points on `0..n`.
pub fn validate_pairing(pair_of: &[usize]) -> Result<()> {
    let n = pair_of.len();
    for (i, &p) in pair_of.iter().enumerate() {
        if p >= n || p == i || pair_of[p] != i {
            return Err(ObjectiveError::Contract(format!(
                "pair_of must be a fixed-point-free involution; slot {i} maps to {p}"
            )));
        }
    }
    Ok(())
}

/// The standard `i <-> i + N` pairing for `2N` rows.
pub fn halves_pairing(rows: usize) -> Vec<usize> {
    let n = rows / 2;
    (0..rows).map(|i| crate::augment::pair_of(i, n)).collect()
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(ObjectiveError::Contract(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// Loss from an already computed similarity matrix.
pub fn nt_xent_from_similarity<S: Scalar>(
    sim: &SimilarityMatrix<S>,
    pair_of: &[usize],
    tau: f64,
) -> Result<LossValue<S>> {
    check_tau(tau)?;
    if pair_of.len() != sim.size() {
        return Err(ObjectiveError::Shape(format!(
            "pairing covers {} rows, batch has {}",
            pair_of.len(),
            sim.size()
        )));
    }
    validate_pairing(pair_of)?;
    let (per_anchor, _) = anchor_terms(sim, pair_of, S::from_f64_lossy(tau));
    let count = S::from_usize(per_anchor.len()).expect("count");
    let total = per_anchor.iter().copied().sum::<S>() / count;
    Ok(LossValue { total, per_anchor })
}

/// Per-anchor losses plus the row softmax over `k != i`.
fn anchor_terms<S: Scalar>(sim: &SimilarityMatrix<S>, pair_of: &[usize], tau: S) -> (Vec<S>, Vec<S>) {
    let n = sim.size();
    let mut terms = Vec::with_capacity(n);
    let mut softmax = vec![S::zero(); n * n];
    for i in 0..n {
        let row = &sim.values()[i * n..(i + 1) * n];
        let max = (0..n)
            .filter(|k| *k != i)
            .map(|k| row[k] / tau)
            .fold(S::neg_infinity(), S::max);
        let mut denom = S::zero();
        for k in (0..n).filter(|k| *k != i) {
            let e = (row[k] / tau - max).exp();
            softmax[i * n + k] = e;
            denom = denom + e;
        }
        for k in (0..n).filter(|k| *k != i) {
            softmax[i * n + k] = softmax[i * n + k] / denom;
        }
        let lse = max + denom.ln();
        // never negative: the positive logit is part of the sum
        terms.push((lse - row[pair_of[i]] / tau).max(S::zero()));
    }
    (terms, softmax)
}

pub fn nt_xent<S: Scalar>(z: &Tensor<S>, pair_of: &[usize], tau: f64) -> Result<LossValue<S>> {
    check_tau(tau)?;
    let sim = cosine_similarity_matrix(z)?;
    nt_xent_from_similarity(&sim, pair_of, tau)
}

/// Loss and its gradient with respect to the raw rows of `z`.
pub fn nt_xent_with_grad<S: Scalar>(
    z: &Tensor<S>,
    pair_of: &[usize],
    tau: f64,
) -> Result<(LossValue<S>, Tensor<S>)> {
    let loss = nt_xent(z, pair_of, tau)?;
    let (rows, d) = rows_of(z)?;
    let (unit, norms) = normalize(z)?;
    let sim = cosine_similarity_matrix(z)?;
    let tau_s = S::from_f64_lossy(tau);
    let (_, softmax) = anchor_terms(&sim, pair_of, tau_s);

    // dL/dS_ik with S the cosine matrix; symmetric part feeds both rows.
    let scale = S::one() / (S::from_usize(rows).expect("rows") * tau_s);
    let mut g = vec![S::zero(); rows * rows];
    for i in 0..rows {
        for k in 0..rows {
            if k == i {
                continue;
            }
            let target = if k == pair_of[i] { S::one() } else { S::zero() };
            g[i * rows + k] = (softmax[i * rows + k] - target) * scale;
        }
    }
    let mut sym = vec![S::zero(); rows * rows];
    for i in 0..rows {
        for k in 0..rows {
            sym[i * rows + k] = g[i * rows + k] + g[k * rows + i];
        }
    }
    let mut d_unit = vec![S::zero(); rows * d];
    S::gemm(rows, rows, d, &sym, false, &unit, false, S::zero(), &mut d_unit);

    // through u = z / |z|
    let mut dz = vec![S::zero(); rows * d];
    for i in 0..rows {
        let u = &unit[i * d..(i + 1) * d];
        let du = &d_unit[i * d..(i + 1) * d];
        let radial = u.iter().zip(du).map(|(a, b)| *a * *b).sum::<S>();
        for j in 0..d {
            dz[i * d + j] = (du[j] - u[j] * radial) / norms[i];
        }
    }
    let grad = Tensor::new(vec![rows, d], dz).map_err(|e| ObjectiveError::Shape(e.to_string()))?;
    Ok((loss, grad))
}

/// Records the loss on `graph` as a scalar node differentiable w.r.t. `z`.
pub fn nt_xent_on_graph<S: Scalar>(
    graph: &mut Graph<S>,
    z: Var,
    pair_of: &[usize],
    tau: f64,
) -> Result<(Var, LossValue<S>)> {
    let (loss, grad) = nt_xent_with_grad(graph.value(z), pair_of, tau)?;
    let value = Tensor::scalar(loss.total);
    let var = graph.custom(&[z], value, move |dy, _| {
        let scale = dy.data()[0];
        let mut g = grad.clone();
        g.data_mut().iter_mut().for_each(|v| *v = *v * scale);
        vec![g]
    });
    Ok((var, loss))
}
