//! Task embeddings: barycentric projection of an empirical
//! state-action-reward batch onto a fixed synthetic reference cloud via
//! an exact optimal-transport solve, plus cosine similarity between
//! embeddings and the halving moving average that smooths them.

use ndarray::{Array2, ArrayView2};
use thiserror::Error;

use crate::ot::{solve_ot, OtError, TransportPlan};
use crate::rng::DetRng;

#[derive(Debug, Error, PartialEq)]
pub enum EmbedError {
    #[error("feature dimension mismatch: batch {batch} vs reference {reference}")]
    DimMismatch { batch: usize, reference: usize },
    #[error("embedding shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("zero-norm embedding (uninitialized)")]
    ZeroNorm,
    #[error("batch contains a non-finite entry")]
    NonFinite,
    #[error(transparent)]
    Transport(#[from] OtError),
}

/// One row per transition: concatenated (state, one-hot action, reward).
#[derive(Debug, Clone)]
pub struct SarBatch {
    pub rows: Array2<f64>,
}

impl SarBatch {
    /// Assembles rows from raw transitions. Actions are one-hot encoded
    /// with `action_count` slots; the reward occupies the final column.
    pub fn from_transitions(
        observations: ArrayView2<f32>,
        actions: &[u32],
        rewards: &[f64],
        action_count: usize,
    ) -> Self {
        let n = observations.nrows();
        assert_eq!(actions.len(), n);
        assert_eq!(rewards.len(), n);
        let d_s = observations.ncols();
        let d = d_s + action_count + 1;
        let mut rows = Array2::zeros((n, d));
        for t in 0..n {
            for k in 0..d_s {
                rows[(t, k)] = f64::from(observations[(t, k)]);
            }
            rows[(t, d_s + actions[t] as usize)] = 1.0;
            rows[(t, d - 1)] = rewards[t];
        }
        Self { rows }
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }
}

/// Fixed synthetic reference cloud, bit-identical across the collective.
#[derive(Debug, Clone)]
pub struct ReferenceSet {
    pub points: Array2<f64>,
}

impl ReferenceSet {
    /// M points from Uniform(-1,1)^d drawn with the collective-wide seed,
    /// generated row-major so every agent builds the same bytes.
    pub fn generate(seed: u64, m: usize, d: usize) -> Self {
        let mut rng = DetRng::derive(seed, "reference", 0);
        let mut points = Array2::zeros((m, d));
        for i in 0..m {
            for k in 0..d {
                points[(i, k)] = rng.uniform_pm(1.0);
            }
        }
        Self { points }
    }

    pub fn size(&self) -> usize {
        self.points.nrows()
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }
}

/// M x d embedding matrix with an update counter.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskEmbedding {
    pub v: Array2<f64>,
    pub version: u64,
    pub owner: u32,
}

impl TaskEmbedding {
    pub fn zeros(m: usize, d: usize, owner: u32) -> Self {
        Self {
            v: Array2::zeros((m, d)),
            version: 0,
            owner,
        }
    }

    pub fn norm(&self) -> f64 {
        self.v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Squared Euclidean cost matrix between batch rows and reference points.
fn squared_cost(batch: &SarBatch, reference: &ReferenceSet) -> Array2<f64> {
    let n = batch.len();
    let m = reference.size();
    let mut cost = Array2::zeros((n, m));
    for t in 0..n {
        let x = batch.rows.row(t);
        for j in 0..m {
            let r = reference.points.row(j);
            let mut acc = 0.0;
            for k in 0..x.len() {
                let diff = x[k] - r[k];
                acc += diff * diff;
            }
            cost[(t, j)] = acc;
        }
    }
    cost
}

/// Barycentric projection v_m = sum_t gamma[t][m] * x_t with the optimal
/// plan under squared Euclidean cost. The projection is kept unnormalized
/// (rows carry the 1/M column mass); cosine similarity is scale-invariant
/// so downstream selection is unaffected.
pub fn embed(
    batch: &SarBatch,
    reference: &ReferenceSet,
    owner: u32,
) -> Result<(TaskEmbedding, TransportPlan), EmbedError> {
    if batch.dim() != reference.dim() {
        return Err(EmbedError::DimMismatch {
            batch: batch.dim(),
            reference: reference.dim(),
        });
    }
    if batch.rows.iter().any(|x| !x.is_finite()) {
        return Err(EmbedError::NonFinite);
    }
    let cost = squared_cost(batch, reference);
    let plan = solve_ot(cost.view())?;
    let v = plan.gamma.t().dot(&batch.rows);
    Ok((
        TaskEmbedding {
            v,
            version: 1,
            owner,
        },
        plan,
    ))
}

/// Halving moving average: v <- (v_old + v_new) / 2, version bumped.
pub fn update_moving_average(
    old: &TaskEmbedding,
    new: &TaskEmbedding,
) -> Result<TaskEmbedding, EmbedError> {
    if old.v.dim() != new.v.dim() {
        return Err(EmbedError::ShapeMismatch(old.v.dim(), new.v.dim()));
    }
    Ok(TaskEmbedding {
        v: (&old.v + &new.v) * 0.5,
        version: old.version + 1,
        owner: old.owner,
    })
}

/// Cosine similarity between vectorized embeddings, in [-1, 1].
pub fn cosine(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64, EmbedError> {
    if a.dim() != b.dim() {
        return Err(EmbedError::ShapeMismatch(a.dim(), b.dim()));
    }
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(EmbedError::ZeroNorm);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn batch_from(rows: Array2<f64>) -> SarBatch {
        SarBatch { rows }
    }

    #[test]
    fn batch_equal_to_reference_projects_to_scaled_reference() {
        let reference = ReferenceSet::generate(99, 5, 7);
        let batch = batch_from(reference.points.clone());
        let (emb, plan) = embed(&batch, &reference, 0).unwrap();
        assert!(plan.cost.abs() < 1e-12);
        let expected = &reference.points * (1.0 / 5.0);
        for (a, b) in emb.v.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn duplicated_batch_projects_to_scaled_reference() {
        // N = 2M with each reference point duplicated: every copy carries
        // 1/N = 1/(2M) mass to its own reference point.
        let reference = ReferenceSet::generate(7, 3, 4);
        let mut rows = Array2::zeros((6, 4));
        for i in 0..6 {
            for k in 0..4 {
                rows[(i, k)] = reference.points[(i / 2, k)];
            }
        }
        let (emb, plan) = embed(&batch_from(rows), &reference, 0).unwrap();
        assert!(plan.cost.abs() < 1e-12);
        let expected = &reference.points * (1.0 / 3.0);
        for (a, b) in emb.v.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn one_dimensional_instance_matches_enumerated_coupling() {
        // batch {0, 1}, reference {0.25, 0.75}: of the two feasible
        // vertices, pairing 0->0.25 and 1->0.75 costs 2*(0.25^2)/2 = 0.0625
        // versus the crossed pairing at 0.3125, so the plan is the identity
        // and v = (0, 0.5).
        let reference = ReferenceSet {
            points: array![[0.25], [0.75]],
        };
        let batch = batch_from(array![[0.0], [1.0]]);
        let (emb, plan) = embed(&batch, &reference, 0).unwrap();
        assert!((plan.gamma[(0, 0)] - 0.5).abs() < 1e-12);
        assert!((plan.gamma[(1, 1)] - 0.5).abs() < 1e-12);
        assert!((emb.v[(0, 0)] - 0.0).abs() < 1e-12);
        assert!((emb.v[(1, 0)] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn embedding_is_permutation_equivariant_in_rows() {
        let reference = ReferenceSet::generate(3, 4, 5);
        let mut rng = crate::rng::DetRng::new(17);
        let rows = Array2::from_shape_fn((9, 5), |_| rng.uniform_pm(1.0));
        let (base, _) = embed(&batch_from(rows.clone()), &reference, 0).unwrap();
        let mut order: Vec<usize> = (0..9).collect();
        rng.shuffle(&mut order);
        let permuted = Array2::from_shape_fn((9, 5), |(i, k)| rows[(order[i], k)]);
        let (perm, _) = embed(&batch_from(permuted), &reference, 0).unwrap();
        for (a, b) in base.v.iter().zip(perm.v.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn moving_average_examples() {
        let a = TaskEmbedding {
            v: array![[2.0, 4.0]],
            version: 3,
            owner: 1,
        };
        let same = update_moving_average(&a, &a).unwrap();
        assert_eq!(same.v, a.v);
        assert_eq!(same.version, 4);

        let zero = TaskEmbedding::zeros(1, 2, 1);
        let half = update_moving_average(&zero, &a).unwrap();
        assert_eq!(half.v, array![[1.0, 2.0]]);
    }

    #[test]
    fn three_constant_updates_leave_an_eighth_of_the_gap() {
        let v0 = TaskEmbedding {
            v: array![[8.0]],
            version: 1,
            owner: 0,
        };
        let target = TaskEmbedding {
            v: array![[0.0]],
            version: 1,
            owner: 0,
        };
        let mut v = v0.clone();
        for _ in 0..3 {
            v = update_moving_average(&v, &target).unwrap();
        }
        // v = c + (v0 - c) / 8 with c = 0
        assert!((v.v[(0, 0)] - 1.0).abs() < 1e-12);
        assert_eq!(v.version, 4);
    }

    #[test]
    fn cosine_identities() {
        let v = array![[1.0, 2.0], [3.0, -1.0]];
        assert!((cosine(v.view(), v.view()).unwrap() - 1.0).abs() < 1e-12);
        let neg = &v * -1.0;
        assert!((cosine(v.view(), neg.view()).unwrap() + 1.0).abs() < 1e-12);
        let scaled = &v * 7.5;
        assert!((cosine(v.view(), scaled.view()).unwrap() - 1.0).abs() < 1e-12);
        let bigger = &v * 3.0;
        let also = &v * 11.0;
        assert!((cosine(bigger.view(), also.view()).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_norm_is_an_error() {
        let z = Array2::<f64>::zeros((2, 2));
        let v = array![[1.0, 0.0], [0.0, 1.0]];
        assert_eq!(cosine(z.view(), v.view()), Err(EmbedError::ZeroNorm));
    }

    #[test]
    fn reference_is_reproducible_and_in_range() {
        let a = ReferenceSet::generate(1234, 50, 67);
        let b = ReferenceSet::generate(1234, 50, 67);
        assert_eq!(a.points, b.points);
        assert!(a.points.iter().all(|x| (-1.0..1.0).contains(x)));
    }

    #[test]
    fn sar_rows_are_assembled_correctly() {
        let obs = ndarray::Array2::from_shape_vec((2, 3), vec![0.1f32, 0.2, 0.3, -0.1, -0.2, -0.3])
            .unwrap();
        let batch = SarBatch::from_transitions(obs.view(), &[1, 0], &[0.0, 1.0], 2);
        assert_eq!(batch.dim(), 3 + 2 + 1);
        assert_eq!(batch.rows[(0, 3)], 0.0);
        assert_eq!(batch.rows[(0, 4)], 1.0);
        assert_eq!(batch.rows[(1, 3)], 1.0);
        assert_eq!(batch.rows[(1, 5)], 1.0);
    }
}
