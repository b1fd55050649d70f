//! Closed-form conditional density estimation over finite decoder classes,
//! and the exact kinematics oracles it is tested against.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dp::{propagate, PropagateOptions};
use crate::error::{Error, Result};
use crate::model::{Action, BlockMdp, ObsId};
use crate::policy::{Behavior, Decoder, Schedule};

/// One inverse-kinematics sample: rollout index, action at layer `t`, and the
/// observations at layers `t` and `h`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IkRecord {
    pub index: usize,
    pub action: Action,
    pub x_t: ObsId,
    pub x_h: ObsId,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IkDataset {
    pub t: usize,
    pub h: usize,
    pub records: Vec<IkRecord>,
}

impl IkDataset {
    pub fn new(t: usize, h: usize) -> Self {
        Self { t, h, records: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Dimensions of a [`ConditionalTable`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableShape {
    pub layer: usize,
    pub target_layer: usize,
    /// Number of decoded labels at `layer`.
    pub left: usize,
    /// Number of decoded labels at `target_layer`.
    pub right: usize,
    pub num_actions: usize,
    /// Size of the index part of the codomain; 1 for action-only tables.
    pub num_indices: usize,
}

impl TableShape {
    pub fn width(&self) -> usize {
        self.num_actions * self.num_indices
    }

    fn rows(&self) -> usize {
        self.left * self.right
    }
}

/// `f(col | z, z')`, with `col = a * num_indices + j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionalTable {
    shape: TableShape,
    probs: Vec<f64>,
    #[serde(skip)]
    decoder: Option<Arc<Decoder>>,
}

impl ConditionalTable {
    /// Normalizes per-row counts; rows with no counts become uniform.
    pub fn from_counts(shape: TableShape, counts: &[u64], decoder: Option<Arc<Decoder>>) -> Self {
        let width = shape.width();
        assert_eq!(counts.len(), shape.rows() * width);
        let mut probs = vec![0.0; counts.len()];
        for (row, out) in counts.chunks(width).zip(probs.chunks_mut(width)) {
            let total: u64 = row.iter().sum();
            if total == 0 {
                out.fill(1.0 / width as f64);
            } else {
                for (p, &c) in out.iter_mut().zip(row) {
                    *p = c as f64 / total as f64;
                }
            }
        }
        Self { shape, probs, decoder }
    }

    /// Builds a table from explicit rows; each row must be a distribution.
    pub fn from_probs(shape: TableShape, probs: Vec<f64>, decoder: Option<Arc<Decoder>>) -> Result<Self> {
        if probs.len() != shape.rows() * shape.width() {
            return Err(Error::ShapeMismatch("probability vector has wrong length".into()));
        }
        Ok(Self { shape, probs, decoder })
    }

    pub fn shape(&self) -> TableShape {
        self.shape
    }

    pub fn layer(&self) -> usize {
        self.shape.layer
    }

    pub fn target_layer(&self) -> usize {
        self.shape.target_layer
    }

    pub fn num_indices(&self) -> usize {
        self.shape.num_indices
    }

    pub fn num_actions(&self) -> usize {
        self.shape.num_actions
    }

    pub fn decoder(&self) -> Option<&Arc<Decoder>> {
        self.decoder.as_ref()
    }

    pub fn with_decoder(mut self, decoder: Arc<Decoder>) -> Self {
        self.decoder = Some(decoder);
        self
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn row(&self, z: usize, z2: usize) -> &[f64] {
        let w = self.shape.width();
        let r = z * self.shape.right + z2;
        &self.probs[r * w..(r + 1) * w]
    }

    pub fn get(&self, z: usize, z2: usize, action: Action, index: usize) -> f64 {
        self.row(z, z2)[action * self.shape.num_indices + index]
    }

    /// Lexicographic argmax over `(a, j)` of row `(z, z2)`; ties go to the
    /// first cell. Also returns the number of cells read.
    pub fn argmax(&self, z: usize, z2: usize) -> (Action, usize, usize) {
        let row = self.row(z, z2);
        let mut best = 0;
        for (k, &p) in row.iter().enumerate().skip(1) {
            if p > row[best] {
                best = k;
            }
        }
        let j = self.shape.num_indices;
        (best / j, best % j, row.len())
    }
}

/// Output of [`fit_mle`].
#[derive(Clone, Debug)]
pub struct MleFit {
    pub table: ConditionalTable,
    pub chosen: usize,
    /// Maximized log-likelihood for each decoder, in class order.
    pub log_likelihoods: Vec<f64>,
}

/// Counts of `(z, z', col)` cells and the resulting log-likelihood.
pub(crate) fn count_cells(shape: TableShape, cells: impl Iterator<Item = (usize, usize, usize)>) -> (Vec<u64>, f64) {
    let width = shape.width();
    let mut counts = vec![0u64; shape.rows() * width];
    for (z, z2, col) in cells {
        counts[(z * shape.right + z2) * width + col] += 1;
    }
    let ll = log_likelihood(&counts, width);
    (counts, ll)
}

/// `Σ c ln(c / row total)`, with `0 ln 0 = 0`.
fn log_likelihood(counts: &[u64], width: usize) -> f64 {
    let mut ll = 0.0;
    for row in counts.chunks(width) {
        let total: u64 = row.iter().sum();
        if total == 0 {
            continue;
        }
        let total = total as f64;
        for &c in row.iter().filter(|&&c| c > 0) {
            let c = c as f64;
            ll += c * (c / total).ln();
        }
    }
    ll
}

/// Log-likelihood of `dataset` under an arbitrary table read through `decoder`.
pub fn dataset_log_likelihood(dataset: &IkDataset, table: &ConditionalTable, decoder: &Decoder) -> f64 {
    dataset
        .records
        .iter()
        .map(|r| table.get(decoder.decode(r.x_t), decoder.decode(r.x_h), r.action, r.index).ln())
        .sum()
}

/// Maximum-likelihood fit of `f((a, j) | φ(x_t), φ(x_h))` jointly over the
/// decoder class and all stochastic tables. For a fixed decoder the maximizer
/// is the empirical conditional; the best decoder wins, ties to the lowest index.
pub fn fit_mle(dataset: &IkDataset, class: &[Arc<Decoder>], shape: TableShape) -> Result<MleFit> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if class.is_empty() {
        return Err(Error::InvalidParameter("decoder class is empty".into()));
    }
    let j = shape.num_indices;
    let fits: Vec<(Vec<u64>, f64)> = class
        .par_iter()
        .map(|phi| {
            count_cells(
                shape,
                dataset
                    .records
                    .iter()
                    .map(|r| (phi.decode(r.x_t), phi.decode(r.x_h), r.action * j + r.index)),
            )
        })
        .collect();
    let mut chosen = 0;
    for (k, (_, ll)) in fits.iter().enumerate() {
        if *ll > fits[chosen].1 {
            chosen = k;
        }
    }
    let log_likelihoods = fits.iter().map(|(_, ll)| *ll).collect();
    let table = ConditionalTable::from_counts(shape, &fits[chosen].0, Some(class[chosen].clone()));
    Ok(MleFit { table, chosen, log_likelihoods })
}

/// One tabular sample: latent state at `t`, action, latent state at `h`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TabularRecord {
    pub s_t: usize,
    pub action: Action,
    pub s_h: usize,
}

/// Empirical `f(a | s_t, s_h)`; `shape.num_indices` must be 1.
pub fn fit_mle_tabular(records: &[TabularRecord], shape: TableShape) -> Result<ConditionalTable> {
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if shape.num_indices != 1 {
        return Err(Error::ShapeMismatch("tabular tables are action-only".into()));
    }
    let (counts, _) = count_cells(shape, records.iter().map(|r| (r.s_t, r.s_h, r.action)));
    Ok(ConditionalTable::from_counts(shape, &counts, None))
}

/// Exact rollout law `P[s_h = s' | s_t = s, a_t = a, rollout j]`, from which
/// the Bayes predictors and forward kinematics are read off.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KinematicsTable {
    pub t: usize,
    pub h: usize,
    pub left: usize,
    pub right: usize,
    pub num_actions: usize,
    pub num_rollouts: usize,
    reach: Vec<f64>,
}

impl KinematicsTable {
    pub fn reach(&self, s: usize, a: Action, j: usize, s2: usize) -> f64 {
        self.reach[((s * self.num_actions + a) * self.num_rollouts + j) * self.right + s2]
    }

    /// `P_FK(i | s, a)`: landing on `i` when rolling out with policy `i`.
    pub fn forward(&self, i: usize, s: usize, a: Action) -> f64 {
        self.reach(s, a, i, i)
    }

    /// Normalizer of the joint `(a, j)` form; zero means undefined.
    pub fn normalizer(&self, s: usize, s2: usize) -> f64 {
        let mut z = 0.0;
        for a in 0..self.num_actions {
            for j in 0..self.num_rollouts {
                z += self.reach(s, a, j, s2);
            }
        }
        z
    }

    /// `P_bayes((a, j) | s, s')` under uniform actions and uniform rollout
    /// index, laid out like a [`ConditionalTable`] row; `None` when `Z = 0`.
    pub fn bayes_row(&self, s: usize, s2: usize) -> Option<Vec<f64>> {
        let z = self.normalizer(s, s2);
        (z > 0.0).then(|| {
            let mut row = Vec::with_capacity(self.num_actions * self.num_rollouts);
            for a in 0..self.num_actions {
                for j in 0..self.num_rollouts {
                    row.push(self.reach(s, a, j, s2) / z);
                }
            }
            row
        })
    }

    /// Tabular form for rollout `i`: `P_bayes(a | s, s')` normalized over
    /// actions only; `None` when the normalizer vanishes.
    pub fn bayes_row_tabular(&self, i: usize, s: usize, s2: usize) -> Option<Vec<f64>> {
        let row: Vec<f64> = (0..self.num_actions).map(|a| self.reach(s, a, i, s2)).collect();
        let z: f64 = row.iter().sum();
        (z > 0.0).then(|| row.iter().map(|p| p / z).collect())
    }

    /// Exact law of `(s_t, s_h)` in the regression data, given the layer-`t`
    /// roll-in distribution. With `rollout = Some(i)` only rollout `i` is used
    /// (tabular form); otherwise the index is uniform.
    pub fn pair_mass(&self, start: &[f64], rollout: Option<usize>) -> Vec<f64> {
        let mut w = vec![0.0; self.left * self.right];
        let rollouts: Vec<usize> = match rollout {
            Some(i) => vec![i],
            None => (0..self.num_rollouts).collect(),
        };
        let scale = 1.0 / (self.num_actions * rollouts.len()) as f64;
        for s in 0..self.left {
            for a in 0..self.num_actions {
                for &j in &rollouts {
                    for s2 in 0..self.right {
                        w[s * self.right + s2] += start[s] * scale * self.reach(s, a, j, s2);
                    }
                }
            }
        }
        w
    }
}

/// Exact rollout laws from layer `t` to layer `h`, where `rollouts[j]` takes
/// over at `t + 1`. With `h = t + 1` the rollouts are never executed.
pub fn bayes_predictor(model: &BlockMdp, rollouts: &[Behavior], t: usize, h: usize) -> Result<KinematicsTable> {
    if t >= h || h >= model.horizon() {
        return Err(Error::LayerMismatch(format!("need t < h < H, got t={t}, h={h}")));
    }
    if rollouts.is_empty() {
        return Err(Error::InvalidParameter("at least one rollout policy is required".into()));
    }
    let (left, right, na, nr) = (model.layer_size(t), model.layer_size(h), model.num_actions(), rollouts.len());
    let mut reach = vec![0.0; left * na * nr * right];
    for s in 0..left {
        for a in 0..na {
            let next = model.transition(t, s, a);
            for (j, b) in rollouts.iter().enumerate() {
                let dist = if t + 1 == h {
                    next.to_vec()
                } else {
                    let schedule = Schedule::empty().then(t + 1, b.clone());
                    let p = propagate(model, t + 1, next, &schedule, h, PropagateOptions::default())?;
                    p.occupancy.layer(h).to_vec()
                };
                let base = ((s * na + a) * nr + j) * right;
                reach[base..base + right].copy_from_slice(&dist);
            }
        }
    }
    Ok(KinematicsTable { t, h, left, right, num_actions: na, num_rollouts: nr, reach })
}

/// Forward kinematics only needs rollout `i` for target `i`; this is the same
/// computation as [`bayes_predictor`] and is provided under its own name.
pub fn forward_kinematics(model: &BlockMdp, rollouts: &[Behavior], t: usize, h: usize) -> Result<KinematicsTable> {
    bayes_predictor(model, rollouts, t, h)
}

/// `E_{(s_t, s_h) ~ w} Σ_cols (f̂(col | φ̂(x_t), φ̂(x_h)) − P_bayes(col | s_t, s_h))²`,
/// with observations drawn from the emissions when `fhat` carries a decoder.
/// `rollout = Some(i)` compares against the tabular form for rollout `i`.
/// Pairs with zero weight or an undefined oracle row are skipped.
pub fn mle_population_error(
    model: &BlockMdp,
    fhat: &ConditionalTable,
    oracle: &KinematicsTable,
    rollout: Option<usize>,
    weights: &[f64],
) -> Result<f64> {
    let shape = fhat.shape();
    let expected_width = match rollout {
        Some(_) => oracle.num_actions,
        None => oracle.num_actions * oracle.num_rollouts,
    };
    if shape.width() != expected_width || weights.len() != oracle.left * oracle.right {
        return Err(Error::ShapeMismatch("table, oracle and weights disagree".into()));
    }
    if fhat.decoder().is_none() && (shape.left != oracle.left || shape.right != oracle.right) {
        return Err(Error::ShapeMismatch("latent table does not match oracle layers".into()));
    }
    let mut total = 0.0;
    for s in 0..oracle.left {
        for s2 in 0..oracle.right {
            let w = weights[s * oracle.right + s2];
            if w == 0.0 {
                continue;
            }
            let truth = match rollout {
                Some(i) => oracle.bayes_row_tabular(i, s, s2),
                None => oracle.bayes_row(s, s2),
            };
            let Some(truth) = truth else { continue };
            let sq = |row: &[f64]| row.iter().zip(&truth).map(|(f, p)| (f - p) * (f - p)).sum::<f64>();
            match fhat.decoder() {
                None => total += w * sq(fhat.row(s, s2)),
                Some(phi) => {
                    for &(x, qx) in model.emission(oracle.t, s) {
                        for &(y, qy) in model.emission(oracle.h, s2) {
                            total += w * qx * qy * sq(fhat.row(phi.decode(x), phi.decode(y)));
                        }
                    }
                }
            }
        }
    }
    Ok(total)
}

/// Statistical rate for the pooled BMDP regression:
/// `n^{-1/2} sqrt(S³ A ln n + ln(|Φ|/δ))`.
pub fn epsilon_stat(n: f64, delta: f64, states: f64, actions: f64, class_size: f64) -> f64 {
    (states.powi(3) * actions * n.ln() + (class_size / delta).ln()).sqrt() / n.sqrt()
}

/// Statistical rate for one tabular regression: `n^{-1/2} sqrt(S² A ln n + ln(1/δ))`.
pub fn epsilon_stat_tabular(n: f64, delta: f64, states: f64, actions: f64) -> f64 {
    (states.powi(2) * actions * n.ln() + (1.0 / delta).ln()).sqrt() / n.sqrt()
}

/// Total-variation distance between two rows.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::two_layer_chain;

    fn shape(left: usize, right: usize, a: usize, j: usize) -> TableShape {
        TableShape { layer: 0, target_layer: 1, left, right, num_actions: a, num_indices: j }
    }

    #[test]
    fn unseen_rows_are_uniform_and_rows_normalize() {
        let t = ConditionalTable::from_counts(shape(2, 1, 2, 1), &[3, 1, 0, 0], None);
        assert_eq!(t.row(0, 0), &[0.75, 0.25]);
        assert_eq!(t.row(1, 0), &[0.5, 0.5]);
    }

    #[test]
    fn uniform_row_argmax_is_first_cell() {
        let t = ConditionalTable::from_counts(shape(1, 1, 3, 2), &[0; 6], None);
        assert_eq!(t.argmax(0, 0), (0, 0, 6));
        let t = ConditionalTable::from_counts(shape(1, 1, 3, 2), &[0, 1, 0, 0, 0, 5], None);
        assert_eq!(t.argmax(0, 0), (2, 1, 6));
    }

    #[test]
    fn single_record_has_zero_loglik_for_every_decoder() {
        let m = two_layer_chain();
        let class = vec![Arc::new(Decoder::from_model(&m)), Arc::new(Decoder::new(vec![0, 0, 1, 1]))];
        let mut d = IkDataset::new(0, 1);
        d.records.push(IkRecord { index: 1, action: 0, x_t: 0, x_h: 2 });
        let fit = fit_mle(&d, &class, shape(2, 2, 2, 2)).unwrap();
        assert_eq!(fit.log_likelihoods, vec![0.0, 0.0]);
        assert_eq!(fit.chosen, 0);
        assert_eq!(fit.table.get(0, 0, 0, 1), 1.0);
    }

    #[test]
    fn empty_inputs_are_errors() {
        let class = vec![Arc::new(Decoder::new(vec![0]))];
        assert!(matches!(fit_mle(&IkDataset::new(0, 1), &class, shape(1, 1, 1, 1)), Err(Error::EmptyDataset)));
        assert!(matches!(fit_mle_tabular(&[], shape(1, 1, 1, 1)), Err(Error::EmptyDataset)));
    }

    #[test]
    fn uniform_fit_against_point_mass_oracle() {
        // One cell of weight 1, oracle puts all mass on action 0 (chain: action 0 keeps index 0).
        let m = two_layer_chain();
        let oracle = bayes_predictor(&m, &[Behavior::Uniform], 0, 1).unwrap();
        let fhat = ConditionalTable::from_counts(shape(2, 2, 2, 1), &[0; 8], None);
        let mut w = vec![0.0; 4];
        w[0] = 1.0;
        let err = mle_population_error(&m, &fhat, &oracle, Some(0), &w).unwrap();
        let a = 2.0f64;
        assert!((err - ((1.0 - 1.0 / a).powi(2) + (a - 1.0) / (a * a))).abs() < 1e-15);
    }

    #[test]
    fn epsilon_stat_shrinks_with_n() {
        assert!(epsilon_stat(1e4, 0.1, 3.0, 2.0, 32.0) < epsilon_stat(1e3, 0.1, 3.0, 2.0, 32.0));
        assert!(epsilon_stat_tabular(1e4, 0.1, 3.0, 2.0) > 0.0);
    }
}
