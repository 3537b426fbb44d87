//! Post-training analysis: latent actions, support alignment, statistics, and oracles.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frequency::{frequencies_from_sets, invariant_coords, CoordSet, FrequencyDecomposition};
use crate::model::EncoderModel;
use crate::numerics::{gaussian, inverse, least_squares, matmul, rank, Mat, RngStream, DEFAULT_RANK_TOL};
use crate::synth::{pairs_for_aug, Dataset, PairBatch, World};

/// Threshold on `|M − I|` entries for block-support scoring.
pub const SUPPORT_THRESHOLD: f64 = 0.05;
/// Relative threshold for empirical invariance.
pub const DEFAULT_ETA: f64 = 0.1;
/// Absolute tolerance for counting nonzero rows in the L0 objective.
pub const L0_TOL: f64 = 1e-9;
/// Largest dimension aligned by exhaustive enumeration.
pub const EXHAUSTIVE_ALIGN_MAX: usize = 8;

/// Estimated action `ĥ T ĥ⁻¹` of one augmentation in learned coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentAction {
    pub aug_id: Option<usize>,
    pub m: Mat,
    /// `‖Za − fit‖_F / ‖Za‖_F`.
    pub residual: f64,
    /// Standard deviation of each learned coordinate over the dataset.
    pub scales: Vec<f64>,
}

impl LatentAction {
    /// Action in coordinates rescaled to unit variance: `M'_ij = M_ij · s_j / s_i`.
    pub fn standardized(&self) -> Mat {
        let s = &self.scales;
        Mat::from_fn(self.m.rows(), self.m.cols(), |i, j| self.m.get(i, j) * s[j] / s[i])
    }
}

fn check_rank(z: &Mat, what: &str) -> Result<()> {
    let mu = z.col_means();
    let centered = Mat::from_fn(z.rows(), z.cols(), |i, j| z.get(i, j) - mu[j]);
    let r = rank(&centered, DEFAULT_RANK_TOL);
    if r < z.cols() || centered.max_abs() == 0.0 {
        return Err(Error::Degenerate(format!("{what} latent covariance has rank {r} < {}", z.cols())));
    }
    Ok(())
}

/// Regresses the augmented latents on the clean latents with an intercept.
pub fn latent_action(model: &EncoderModel, ds: &Dataset, world: &World, aug: Option<usize>) -> Result<LatentAction> {
    let n = model.latent_dim;
    if ds.len() < 10 * n {
        return Err(Error::InvalidArgument(format!("latent_action needs at least {} samples, got {}", 10 * n, ds.len())));
    }
    let z = model.encode(&ds.x)?;
    check_rank(&z, "encoder")?;
    let za = model.encode(&world.apply(aug, &ds.x)?)?;
    let design = z.with_ones_column();
    let sol = least_squares(&design, &za)?;
    let fit = matmul(&design, &sol)?;
    let denom = za.frobenius();
    let residual = if denom > 0.0 { fit.sub(&za)?.frobenius() / denom } else { 0.0 };
    let m = Mat::from_fn(n, n, |i, j| sol.get(j, i));
    Ok(LatentAction {
        aug_id: aug,
        m,
        residual,
        scales: z.col_stds(),
    })
}

/// Rows of `M − I` whose ∞-norm exceeds `threshold`.
pub fn action_support(m: &Mat, threshold: f64) -> CoordSet {
    let n = m.rows();
    let mask: Vec<bool> = (0..n)
        .map(|i| (0..m.cols()).any(|j| (m.get(i, j) - if i == j { 1.0 } else { 0.0 }).abs() > threshold))
        .collect();
    CoordSet::from_mask(&mask)
}

/// Outcome of empirical invariance detection for one augmentation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvarianceEstimate {
    pub coords: CoordSet,
    pub mean_abs_delta: Vec<f64>,
    pub warning: Option<String>,
}

/// Declares coordinate `i` invariant iff `mean|Δ_i| < η · max_j mean|Δ_j|`.
pub fn empirical_invariant_coords(model: &EncoderModel, pairs: &[PairBatch], eta: f64) -> Result<Vec<InvarianceEstimate>> {
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(Error::InvalidArgument(format!("eta must lie in (0, 1], got {eta}")));
    }
    pairs
        .iter()
        .map(|p| {
            if p.len() < 100 {
                return Err(Error::InvalidArgument(format!("need at least 100 pairs per augmentation, got {}", p.len())));
            }
            let delta = model.encode(&p.x_aug)?.sub(&model.encode(&p.x)?)?;
            let mean_abs = delta.map(f64::abs).col_means();
            let mx = mean_abs.iter().fold(0.0f64, |a, &v| a.max(v));
            if mx < 1e-12 {
                return Ok(InvarianceEstimate {
                    coords: CoordSet::full(mean_abs.len()),
                    mean_abs_delta: mean_abs,
                    warning: Some("all coordinate deltas below 1e-12; treating every coordinate as invariant".into()),
                });
            }
            let mask: Vec<bool> = mean_abs.iter().map(|&v| v < eta * mx).collect();
            Ok(InvarianceEstimate {
                coords: CoordSet::from_mask(&mask),
                mean_abs_delta: mean_abs,
                warning: None,
            })
        })
        .collect()
}

/// Coordinate relabelling that best matches learned sets to true sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentResult {
    /// `perm[i]` is the true coordinate matched to learned coordinate `i`.
    pub perm: Vec<usize>,
    pub cost: usize,
    pub identity_cost: usize,
    pub exhaustive: bool,
}

impl AlignmentResult {
    /// Moves learned coordinate `i` to position `perm[i]`.
    pub fn apply(&self, m: &Mat) -> Mat {
        permute_action(m, &self.perm)
    }

    pub fn inverse_perm(&self) -> Vec<usize> {
        let mut inv = vec![0; self.perm.len()];
        for (i, &p) in self.perm.iter().enumerate() {
            inv[p] = i;
        }
        inv
    }
}

/// `out[perm[i]][perm[j]] = m[i][j]`.
pub fn permute_action(m: &Mat, perm: &[usize]) -> Mat {
    let mut out = Mat::zeros(m.rows(), m.cols());
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            out.set(perm[i], perm[j], m.get(i, j));
        }
    }
    out
}

fn alignment_cost(learned: &[CoordSet], truth: &[CoordSet], perm: &[usize]) -> usize {
    learned
        .iter()
        .zip(truth)
        .map(|(l, t)| l.permuted(perm).symmetric_difference_len(t))
        .sum()
}

fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Permutation minimizing `Σ_T |π(learned_T) Δ truth_T|`.
///
/// Enumerates all permutations in lexicographic order for `n ≤ 8`, keeping the first
/// minimizer. Larger `n` solves the equivalent assignment problem on per-coordinate
/// signature Hamming distances.
pub fn align_permutation(learned: &[CoordSet], truth: &[CoordSet], n: usize) -> Result<AlignmentResult> {
    if learned.len() != truth.len() {
        return Err(crate::error::dim_err("align_permutation", truth.len(), learned.len()));
    }
    let identity: Vec<usize> = (0..n).collect();
    let identity_cost = alignment_cost(learned, truth, &identity);
    if n <= EXHAUSTIVE_ALIGN_MAX {
        let mut p = identity.clone();
        let mut best = (identity_cost, identity);
        while next_permutation(&mut p) {
            let c = alignment_cost(learned, truth, &p);
            if c < best.0 {
                best = (c, p.clone());
            }
        }
        return Ok(AlignmentResult {
            perm: best.1,
            cost: best.0,
            identity_cost,
            exhaustive: true,
        });
    }
    let cost: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|k| learned.iter().zip(truth).filter(|(l, t)| l.contains(i) != t.contains(k)).count() as f64)
                .collect()
        })
        .collect();
    let perm = hungarian(&cost);
    Ok(AlignmentResult {
        cost: alignment_cost(learned, truth, &perm),
        perm,
        identity_cost,
        exhaustive: false,
    })
}

/// Minimum-cost perfect assignment on a square matrix; `result[row] = column`.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    out
}

/// F1 between predicted and true supports; `1` when both are empty.
pub fn support_f1(predicted: &CoordSet, truth: &CoordSet) -> f64 {
    let tp = predicted.intersection(truth).len();
    let denom = predicted.len() + truth.len();
    if denom == 0 {
        1.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Mean and population standard deviation of `M_ii` over coordinates each augmentation fixes.
pub fn diag_statistic(actions: &[Mat], fixed: &[CoordSet]) -> Result<(f64, f64)> {
    let vals: Vec<f64> = actions
        .iter()
        .zip(fixed)
        .flat_map(|(m, f)| f.iter().map(move |i| m.get(i, i)))
        .collect();
    if vals.is_empty() {
        return Err(Error::InvalidArgument("no off-block diagonal entries to summarize".into()));
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
    Ok((mean, var.sqrt()))
}

/// Per-coordinate mean squared latent change over a family of pair batches.
pub fn mean_squared_delta(model: &EncoderModel, pairs: &[PairBatch]) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; model.latent_dim];
    let mut count = 0usize;
    for p in pairs {
        let d = model.encode(&p.x_aug)?.sub(&model.encode(&p.x)?)?;
        for i in 0..d.rows() {
            acc.iter_mut().zip(d.row(i)).for_each(|(a, v)| *a += v * v);
        }
        count += d.rows();
    }
    if count == 0 {
        return Err(Error::InvalidArgument("empty augmentation family".into()));
    }
    acc.iter_mut().for_each(|a| *a /= count as f64);
    Ok(acc)
}

/// Dot product of the normalized mean-squared-delta profiles of two augmentation families.
pub fn complementarity_score(model: &EncoderModel, pairs_a: &[PairBatch], pairs_b: &[PairBatch]) -> Result<f64> {
    let a = mean_squared_delta(model, pairs_a)?;
    let b = mean_squared_delta(model, pairs_b)?;
    complementarity_from_profiles(&a, &b)
}

pub fn complementarity_from_profiles(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = crate::numerics::norm2(a);
    let nb = crate::numerics::norm2(b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::UndefinedScore("a family produced an all-zero delta profile".into()));
    }
    let s: f64 = a.iter().zip(b).map(|(x, y)| (x / na) * (y / nb)).sum();
    Ok(s.clamp(0.0, 1.0))
}

/// Which matrix lines the L0 objective counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum L0Variant {
    /// Nonzero rows of `[T]_P − I`.
    #[default]
    Rows,
    /// Nonzero columns of `[T]_P − I` (rows of its transpose).
    Columns,
}

/// `Σ_T` count of nonzero lines of `P⁻¹ T̂ P − I` at ∞-norm tolerance `tol`.
pub fn l0_objective(p: &Mat, t_latents: &[Mat], tol: f64, variant: L0Variant) -> Result<usize> {
    let p_inv = inverse(p)?;
    let n = p.rows();
    let mut total = 0;
    for t in t_latents {
        let tp = matmul(&matmul(&p_inv, t)?, p)?.sub(&Mat::identity(n))?;
        let d = match variant {
            L0Variant::Rows => tp,
            L0Variant::Columns => tp.transpose(),
        };
        total += (0..n).filter(|&i| d.row(i).iter().any(|v| v.abs() > tol)).count();
    }
    Ok(total)
}

/// A change of basis with its objective value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasisCandidate {
    pub p: Mat,
    pub l_value: usize,
    /// Column `i` of `P` is `signs[i] · e_{perm[i]}` for signed-permutation candidates.
    pub perm: Option<Vec<usize>>,
    pub signs: Option<Vec<i8>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum SearchMode {
    ExhaustiveSignedPerm,
    RandomSample { k: usize, seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub best: BasisCandidate,
    pub minimizers: Vec<BasisCandidate>,
    pub evaluated: usize,
}

/// Signed permutation matrix with column `i` equal to `signs[i] · e_{perm[i]}`.
pub fn signed_permutation(perm: &[usize], signs: &[i8]) -> Mat {
    let n = perm.len();
    let mut p = Mat::zeros(n, n);
    for i in 0..n {
        p.set(perm[i], i, f64::from(signs[i]));
    }
    p
}

/// Minimizes the L0 objective over a candidate family of bases.
pub fn oracle_search(t_latents: &[Mat], n: usize, mode: SearchMode, variant: L0Variant) -> Result<OracleResult> {
    let mut all = Vec::new();
    match mode {
        SearchMode::ExhaustiveSignedPerm => {
            if n > 4 {
                return Err(Error::InvalidArgument(format!("exhaustive signed-permutation search supports n <= 4, got {n}")));
            }
            let mut perm: Vec<usize> = (0..n).collect();
            loop {
                for mask in 0..(1u32 << n) {
                    let signs: Vec<i8> = (0..n).map(|i| if mask >> i & 1 == 1 { -1 } else { 1 }).collect();
                    let p = signed_permutation(&perm, &signs);
                    let l_value = l0_objective(&p, t_latents, L0_TOL, variant)?;
                    all.push(BasisCandidate {
                        p,
                        l_value,
                        perm: Some(perm.clone()),
                        signs: Some(signs),
                    });
                }
                if !next_permutation(&mut perm) {
                    break;
                }
            }
        }
        SearchMode::RandomSample { k, seed } => {
            let mut rng = RngStream::new(seed, 0x0_5eed);
            while all.len() < k {
                let p = gaussian(&mut rng, n, n);
                match l0_objective(&p, t_latents, L0_TOL, variant) {
                    Ok(l_value) => all.push(BasisCandidate {
                        p,
                        l_value,
                        perm: None,
                        signs: None,
                    }),
                    Err(Error::Singular(_)) => continue,
                    Err(e) => return Err(e),
                }
            }
        }
    }
    let min = all
        .iter()
        .map(|c| c.l_value)
        .min()
        .ok_or_else(|| Error::InvalidArgument("empty candidate family".into()))?;
    let evaluated = all.len();
    let minimizers: Vec<BasisCandidate> = all.into_iter().filter(|c| c.l_value == min).collect();
    Ok(OracleResult {
        best: minimizers[0].clone(),
        minimizers,
        evaluated,
    })
}

/// Whether the basis `P` maps frequency classes onto frequency classes.
///
/// Each frequency of the transformed representation must be spanned by basis vectors whose
/// joint support is exactly one true class of the same size.
pub fn preserves_partition(p: &Mat, t_latents: &[Mat], truth: &FrequencyDecomposition, tol: f64) -> Result<bool> {
    let n = p.rows();
    let p_inv = inverse(p)?;
    let sets = t_latents
        .iter()
        .map(|t| invariant_coords(&matmul(&matmul(&p_inv, t)?, p)?, tol))
        .collect::<Result<Vec<_>>>()?;
    let transformed = frequencies_from_sets(&sets, n)?;
    for class in &transformed.classes {
        let mask: Vec<bool> = (0..n).map(|r| class.iter().any(|c| p.get(r, c).abs() > tol)).collect();
        let support = CoordSet::from_mask(&mask);
        if support.len() != class.len() || !truth.classes.contains(&support) {
            return Ok(false);
        }
    }
    Ok(true)
}

fn standardize(z: &Mat) -> Mat {
    let mu = z.col_means();
    let sd = z.col_stds();
    Mat::from_fn(z.rows(), z.cols(), |i, j| (z.get(i, j) - mu[j]) / sd[j])
}

/// Cross-model identifiability result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossIdResult {
    pub score: f64,
    /// `map[i][j]`: coefficient of standardized model-1 coordinate `j` in model-2 coordinate `i`.
    pub map: Mat,
    /// Class label per model-1 and model-2 coordinate in the best pattern.
    pub labels1: Vec<usize>,
    pub labels2: Vec<usize>,
}

fn distinct_labelings(sizes: &[usize]) -> Vec<Vec<usize>> {
    let mut base: Vec<usize> = sizes.iter().enumerate().flat_map(|(k, &s)| std::iter::repeat_n(k, s)).collect();
    base.sort_unstable();
    let mut out = vec![base.clone()];
    while next_permutation(&mut base) {
        out.push(base.clone());
    }
    out
}

fn best_row_labels(w: &Mat, labels1: &[usize], slots: &[usize], classes: usize) -> (f64, Vec<usize>) {
    let n = w.rows();
    let mut gain = vec![vec![0.0; classes]; n];
    for (i, g) in gain.iter_mut().enumerate() {
        for (j, &c) in labels1.iter().enumerate() {
            g[c] += w.get(i, j);
        }
    }
    let cost: Vec<Vec<f64>> = gain.iter().map(|g| slots.iter().map(|&k| -g[k]).collect()).collect();
    let asg = hungarian(&cost);
    let labels2: Vec<usize> = asg.iter().map(|&s| slots[s]).collect();
    let total = labels2.iter().enumerate().map(|(i, &k)| gain[i][k]).sum();
    (total, labels2)
}

/// Fraction of squared regression mass from model 1 to model 2 that lies inside the best
/// frequency-block pattern.
pub fn cross_identifiability(model1: &EncoderModel, model2: &EncoderModel, ds: &Dataset, truth: &FrequencyDecomposition) -> Result<CrossIdResult> {
    let z1 = model1.encode(&ds.x)?;
    let z2 = model2.encode(&ds.x)?;
    check_rank(&z1, "model 1")?;
    check_rank(&z2, "model 2")?;
    let n = z1.cols();
    if z2.cols() != n || truth.n != n {
        return Err(crate::error::dim_err("cross_identifiability", n, z2.cols()));
    }
    let r = least_squares(&standardize(&z1), &standardize(&z2))?;
    let map = r.transpose();
    let w = map.map(|v| v * v);
    let total: f64 = w.data().iter().sum();
    if total == 0.0 {
        return Err(Error::Degenerate("zero regression map".into()));
    }
    let sizes = truth.class_sizes();
    let slots: Vec<usize> = sizes.iter().enumerate().flat_map(|(k, &s)| std::iter::repeat_n(k, s)).collect();
    let count: f64 = (1..=n).map(|v| v as f64).product::<f64>() / sizes.iter().map(|&s| (1..=s).map(|v| v as f64).product::<f64>()).product::<f64>();
    let mut best = (f64::NEG_INFINITY, Vec::new(), Vec::new());
    if count <= 100_000.0 {
        for l1 in distinct_labelings(&sizes) {
            let (g, l2) = best_row_labels(&w, &l1, &slots, sizes.len());
            if g > best.0 {
                best = (g, l1, l2);
            }
        }
    } else {
        // Alternate between the two labelings from the slot order.
        let mut l1 = slots.clone();
        for _ in 0..50 {
            let (g, l2) = best_row_labels(&w, &l1, &slots, sizes.len());
            let (_, next) = best_row_labels(&w.transpose(), &l2, &slots, sizes.len());
            let done = next == l1;
            if g > best.0 {
                best = (g, l1.clone(), l2);
            }
            l1 = next;
            if done {
                break;
            }
        }
    }
    Ok(CrossIdResult {
        score: (best.0 / total).clamp(0.0, 1.0),
        map,
        labels1: best.1,
        labels2: best.2,
    })
}

/// Scaling recorded next to a heatmap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapInfo {
    pub rows: usize,
    pub cols: usize,
    pub min: f64,
    pub max: f64,
    /// Gray level is `round(255 · (v − offset) · scale)`.
    pub offset: f64,
    pub scale: f64,
}

/// Writes `|z_aug − z|` as `<stem>.pgm` (plain P2), `<stem>.csv`, and `<stem>.json`.
pub fn delta_heatmap(model: &EncoderModel, pairs: &PairBatch, stem: impl AsRef<Path>) -> Result<HeatmapInfo> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no pairs for heatmap".into()));
    }
    let delta = model.encode(&pairs.x_aug)?.sub(&model.encode(&pairs.x)?)?.map(f64::abs);
    let min = delta.data().iter().copied().fold(f64::INFINITY, f64::min);
    let max = delta.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scale = if max > min { 1.0 / (max - min) } else { 0.0 };
    let (rows, cols) = delta.shape();
    let mut pgm = format!("P2\n{cols} {rows}\n255\n");
    for i in 0..rows {
        let line: Vec<String> = delta
            .row(i)
            .iter()
            .map(|&v| ((255.0 * (v - min) * scale).round() as u8).to_string())
            .collect();
        pgm.push_str(&line.join(" "));
        pgm.push('\n');
    }
    let stem = stem.as_ref();
    let with_ext = |ext: &str| {
        let mut p = stem.as_os_str().to_owned();
        p.push(ext);
        std::path::PathBuf::from(p)
    };
    std::fs::write(with_ext(".pgm"), pgm)?;
    delta.write_csv(with_ext(".csv"))?;
    let info = HeatmapInfo {
        rows,
        cols,
        min,
        max,
        offset: min,
        scale,
    };
    std::fs::write(with_ext(".json"), serde_json::to_string_pretty(&info)? + "\n")?;
    Ok(info)
}

/// Summary metrics written by `eval`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub diag_mean: Option<f64>,
    pub diag_std: Option<f64>,
    pub support_f1: Option<f64>,
    pub complementarity: Option<f64>,
    pub l0_value: Option<usize>,
    pub cross_id_score: Option<f64>,
}

/// Full scoring of a trained model against the generating world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunEvaluation {
    pub actions: Vec<LatentAction>,
    pub alignment: AlignmentResult,
    /// Aligned standardized actions.
    pub aligned: Vec<Mat>,
    pub predicted_support: Vec<CoordSet>,
    pub true_support: Vec<CoordSet>,
    pub per_aug_f1: Vec<f64>,
    pub diag_mean: f64,
    pub diag_std: f64,
    /// Learned-basis L0 value (aligned supports), and the true minimum `Σ|A_T^c|`.
    pub l0_value: usize,
    pub l0_truth: usize,
    /// `(eta, mean F1)` of empirical invariance after alignment.
    pub eta_sweep: Vec<(f64, f64)>,
}

impl RunEvaluation {
    pub fn min_f1(&self) -> f64 {
        self.per_aug_f1.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn metrics(&self) -> Metrics {
        Metrics {
            diag_mean: Some(self.diag_mean),
            diag_std: Some(self.diag_std),
            support_f1: Some(self.min_f1()),
            complementarity: None,
            l0_value: Some(self.l0_value),
            cross_id_score: None,
        }
    }
}

/// Latent actions, alignment, block-support F1, and the diagonal statistic for every
/// augmentation of `world`.
pub fn evaluate_run(model: &EncoderModel, ds: &Dataset, world: &World) -> Result<RunEvaluation> {
    let n = model.latent_dim;
    let actions = (0..world.augs.len())
        .map(|k| latent_action(model, ds, world, Some(k)))
        .collect::<Result<Vec<_>>>()?;
    let standardized: Vec<Mat> = actions.iter().map(LatentAction::standardized).collect();
    let learned_fixed: Vec<CoordSet> = standardized
        .iter()
        .map(|m| action_support(m, SUPPORT_THRESHOLD).complement(n))
        .collect();
    let truth_fixed = world.fixed_sets();
    let alignment = align_permutation(&learned_fixed, &truth_fixed, n)?;
    let aligned: Vec<Mat> = standardized.iter().map(|m| alignment.apply(m)).collect();
    let predicted_support: Vec<CoordSet> = aligned.iter().map(|m| action_support(m, SUPPORT_THRESHOLD)).collect();
    let true_support: Vec<CoordSet> = truth_fixed.iter().map(|f| f.complement(n)).collect();
    let per_aug_f1 = predicted_support.iter().zip(&true_support).map(|(p, t)| support_f1(p, t)).collect();
    let (diag_mean, diag_std) = diag_statistic(&aligned, &truth_fixed)?;
    let l0_value = predicted_support.iter().map(CoordSet::len).sum();
    let l0_truth = true_support.iter().map(CoordSet::len).sum();
    let pairs = (0..world.augs.len())
        .map(|k| pairs_for_aug(ds, world, Some(k)))
        .collect::<Result<Vec<_>>>()?;
    let mut eta_sweep = Vec::new();
    for eta in [0.05, DEFAULT_ETA, 0.2] {
        let est = empirical_invariant_coords(model, &pairs, eta)?;
        let f1: f64 = est
            .iter()
            .zip(&true_support)
            .map(|(e, t)| support_f1(&e.coords.complement(n).permuted(&alignment.perm), t))
            .sum::<f64>()
            / est.len().max(1) as f64;
        eta_sweep.push((eta, f1));
    }
    Ok(RunEvaluation {
        actions,
        alignment,
        aligned,
        predicted_support,
        true_support,
        per_aug_f1,
        diag_mean,
        diag_std,
        l0_value,
        l0_truth,
        eta_sweep,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hungarian_small() {
        let c = vec![vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0], vec![3.0, 2.0, 2.0]];
        let a = hungarian(&c);
        let total: f64 = a.iter().enumerate().map(|(i, &j)| c[i][j]).sum();
        assert_eq!(total, 5.0);
    }

    #[test]
    fn lexicographic_permutations() {
        let mut p = vec![0, 1, 2];
        let mut count = 1;
        while next_permutation(&mut p) {
            count += 1;
        }
        assert_eq!(count, 6);
        assert_eq!(p, vec![2, 1, 0]);
    }

    #[test]
    fn f1_edge_cases() {
        assert_eq!(support_f1(&CoordSet::empty(), &CoordSet::empty()), 1.0);
        assert_eq!(support_f1(&CoordSet::range(0, 2), &CoordSet::range(1, 3)), 0.5);
    }

    #[test]
    fn labelings_count() {
        assert_eq!(distinct_labelings(&[1, 2]).len(), 3);
        assert_eq!(distinct_labelings(&[2, 2, 2]).len(), 90);
    }
}
