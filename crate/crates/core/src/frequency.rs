//! Invariant coordinate sets, invariance-frequencies, spectrum tables, and the DFT demo.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::numerics::Mat;

/// Sorted set of coordinate indices.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CoordSet(Vec<usize>);

impl CoordSet {
    /// Builds a set from arbitrary indices, sorting and deduplicating; all must be `< n`.
    pub fn new(mut indices: Vec<usize>, n: usize) -> Result<CoordSet> {
        if let Some(bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::InvalidArgument(format!("coordinate {bad} out of range for n = {n}")));
        }
        indices.sort_unstable();
        indices.dedup();
        Ok(CoordSet(indices))
    }

    pub fn empty() -> CoordSet {
        CoordSet(Vec::new())
    }

    pub fn full(n: usize) -> CoordSet {
        CoordSet((0..n).collect())
    }

    pub fn range(start: usize, end: usize) -> CoordSet {
        CoordSet((start..end).collect())
    }

    pub fn from_mask(mask: &[bool]) -> CoordSet {
        CoordSet(mask.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect())
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.0.binary_search(&i).is_ok()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    pub fn mask(&self, n: usize) -> Vec<bool> {
        let mut m = vec![false; n];
        for &i in &self.0 {
            m[i] = true;
        }
        m
    }

    pub fn complement(&self, n: usize) -> CoordSet {
        CoordSet((0..n).filter(|&i| !self.contains(i)).collect())
    }

    pub fn intersection(&self, other: &CoordSet) -> CoordSet {
        CoordSet(self.iter().filter(|&i| other.contains(i)).collect())
    }

    pub fn union(&self, other: &CoordSet) -> CoordSet {
        let mut v: Vec<usize> = self.0.iter().chain(&other.0).copied().collect();
        v.sort_unstable();
        v.dedup();
        CoordSet(v)
    }

    pub fn symmetric_difference_len(&self, other: &CoordSet) -> usize {
        self.iter().filter(|&i| !other.contains(i)).count() + other.iter().filter(|&i| !self.contains(i)).count()
    }

    /// Image of the set under `perm` (coordinate `i` goes to `perm[i]`).
    pub fn permuted(&self, perm: &[usize]) -> CoordSet {
        let mut v: Vec<usize> = self.iter().map(|i| perm[i]).collect();
        v.sort_unstable();
        CoordSet(v)
    }
}

impl fmt::Display for CoordSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (k, i) in self.0.iter().enumerate() {
            if k > 0 {
                write!(f, ",")?;
            }
            write!(f, "{i}")?;
        }
        write!(f, "}}")
    }
}

/// Coordinates fixed pointwise by a latent linear augmentation: rows of `T̂ − I` with
/// ∞-norm at most `tol`.
pub fn invariant_coords(t_latent: &Mat, tol: f64) -> Result<CoordSet> {
    if !t_latent.is_square() {
        return Err(dim_err("invariant_coords", "square matrix", format!("{:?}", t_latent.shape())));
    }
    let n = t_latent.rows();
    let fixed = (0..n)
        .filter(|&i| {
            t_latent
                .row(i)
                .iter()
                .enumerate()
                .all(|(j, &v)| (v - if i == j { 1.0 } else { 0.0 }).abs() <= tol)
        })
        .collect();
    Ok(CoordSet(fixed))
}

/// Partition of latent coordinates into invariance-frequencies.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrequencyDecomposition {
    pub n: usize,
    pub classes: Vec<CoordSet>,
    pub signatures: Vec<Vec<bool>>,
}

impl FrequencyDecomposition {
    /// Class index of every coordinate.
    pub fn labels(&self) -> Vec<usize> {
        let mut out = vec![0; self.n];
        for (k, c) in self.classes.iter().enumerate() {
            for i in c.iter() {
                out[i] = k;
            }
        }
        out
    }

    pub fn class_sizes(&self) -> Vec<usize> {
        self.classes.iter().map(CoordSet::len).collect()
    }

    /// Checks the partition, distinct-signature, and membership invariants against `sets`.
    pub fn validate(&self, sets: &[CoordSet]) -> Result<()> {
        let mut seen = vec![false; self.n];
        for c in &self.classes {
            if c.is_empty() {
                return Err(Error::InvalidArgument("empty frequency class".into()));
            }
            for i in c.iter() {
                if i >= self.n || seen[i] {
                    return Err(Error::InvalidArgument(format!("coordinate {i} repeated or out of range")));
                }
                seen[i] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::InvalidArgument("classes do not cover every coordinate".into()));
        }
        for a in 0..self.signatures.len() {
            for b in a + 1..self.signatures.len() {
                if self.signatures[a] == self.signatures[b] {
                    return Err(Error::InvalidArgument("duplicate signatures".into()));
                }
            }
        }
        for (c, sig) in self.classes.iter().zip(&self.signatures) {
            for (t, set) in sets.iter().enumerate() {
                let inside = c.iter().all(|i| set.contains(i));
                if inside != sig[t] {
                    return Err(Error::InvalidArgument(format!("signature bit {t} disagrees with membership of {c}")));
                }
            }
        }
        Ok(())
    }
}

/// Groups coordinates by their membership signature across `sets`.
///
/// Classes are ordered by descending signature (all-ones first), ties by smallest index.
pub fn frequencies_from_sets(sets: &[CoordSet], n: usize) -> Result<FrequencyDecomposition> {
    for s in sets {
        if let Some(bad) = s.iter().find(|&i| i >= n) {
            return Err(Error::InvalidArgument(format!("coordinate {bad} out of range for n = {n}")));
        }
    }
    let mut groups: BTreeMap<Vec<bool>, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let sig: Vec<bool> = sets.iter().map(|s| s.contains(i)).collect();
        groups.entry(sig).or_default().push(i);
    }
    let mut entries: Vec<(Vec<bool>, Vec<usize>)> = groups.into_iter().collect();
    entries.sort_by(|(sa, ca), (sb, cb)| sb.cmp(sa).then(ca[0].cmp(&cb[0])));
    let (signatures, classes) = entries.into_iter().map(|(s, c)| (s, CoordSet(c))).unzip();
    Ok(FrequencyDecomposition { n, classes, signatures })
}

/// Fixed set of an augmentation family: the coordinates every member fixes.
pub fn family_fixed_set(members: &[CoordSet], n: usize) -> CoordSet {
    members.iter().fold(CoordSet::full(n), |acc, s| acc.intersection(s))
}

/// Binary table with one row per frequency and one column per augmentation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpectrumTable {
    pub rows: Vec<Vec<u8>>,
}

pub fn spectrum_table(fd: &FrequencyDecomposition) -> SpectrumTable {
    SpectrumTable {
        rows: fd
            .signatures
            .iter()
            .map(|s| s.iter().map(|&b| u8::from(b)).collect())
            .collect(),
    }
}

impl SpectrumTable {
    /// Aligned text rendering with class members as row labels.
    pub fn render(&self, fd: &FrequencyDecomposition, column_names: &[String]) -> String {
        let labels: Vec<String> = fd.classes.iter().map(ToString::to_string).collect();
        let lw = labels.iter().map(String::len).max().unwrap_or(0).max(9);
        let mut out = format!("{:<lw$}", "frequency");
        for c in column_names {
            out.push_str(&format!(" {:>5}", c));
        }
        out.push('\n');
        for (label, row) in labels.iter().zip(&self.rows) {
            out.push_str(&format!("{label:<lw$}"));
            for v in row {
                out.push_str(&format!(" {v:>5}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self, fd: &FrequencyDecomposition, column_names: &[String]) -> String {
        let mut out = String::from("class");
        for c in column_names {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (class, row) in fd.classes.iter().zip(&self.rows) {
            let members: Vec<String> = class.iter().map(|i| i.to_string()).collect();
            out.push_str(&members.join(" "));
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Complex number as a pair of reals.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Complex {
    pub re: f64,
    pub im: f64,
}

impl Complex {
    pub const ONE: Complex = Complex { re: 1.0, im: 0.0 };

    pub fn new(re: f64, im: f64) -> Complex {
        Complex { re, im }
    }

    /// `e^{iθ}`.
    pub fn cis(theta: f64) -> Complex {
        Complex::new(theta.cos(), theta.sin())
    }

    pub fn mul(self, o: Complex) -> Complex {
        Complex::new(self.re * o.re - self.im * o.im, self.re * o.im + self.im * o.re)
    }

    pub fn sub(self, o: Complex) -> Complex {
        Complex::new(self.re - o.re, self.im - o.im)
    }

    pub fn modulus(self) -> f64 {
        self.re.hypot(self.im)
    }
}

impl fmt::Display for Complex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let clean = |v: f64| if v.abs() < 1e-12 { 0.0 } else { v };
        let (re, im) = (clean(self.re), clean(self.im));
        match (re == 0.0, im == 0.0) {
            (_, true) => write!(f, "{re}"),
            (true, false) if im == 1.0 => write!(f, "i"),
            (true, false) if im == -1.0 => write!(f, "-i"),
            (true, false) => write!(f, "{im:.4}i"),
            (false, false) => write!(f, "{re:.4}{:+.4}i", im),
        }
    }
}

/// Eigenvalue table of the cyclic shift on the Fourier basis of `ℂⁿ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DftSpectrum {
    pub n: usize,
    /// `table[k][l]` is the eigenvalue of `τ^l` on `v_k`.
    pub table: Vec<Vec<Complex>>,
    /// Largest modulus of `τ^l v_k − table[k][l]·v_k` over all `k, l`.
    pub max_residual: f64,
}

/// Fourier vector `v_k` with entries `ω^{kj}`, `ω = e^{2πi/n}`.
pub fn fourier_vector(n: usize, k: usize) -> Vec<Complex> {
    (0..n).map(|j| root_of_unity(n, k * j)).collect()
}

fn root_of_unity(n: usize, power: usize) -> Complex {
    let p = power % n;
    // Exact values at quarter turns keep the n = 4 table free of rounding noise.
    if (4 * p).is_multiple_of(n) {
        return match 4 * p / n {
            0 => Complex::new(1.0, 0.0),
            1 => Complex::new(0.0, 1.0),
            2 => Complex::new(-1.0, 0.0),
            _ => Complex::new(0.0, -1.0),
        };
    }
    Complex::cis(2.0 * std::f64::consts::PI * p as f64 / n as f64)
}

/// Cyclic shift `(τa)_j = a_{j+1}`.
pub fn shift(v: &[Complex]) -> Vec<Complex> {
    let n = v.len();
    (0..n).map(|j| v[(j + 1) % n]).collect()
}

pub fn dft_shift_spectrum(n: usize) -> Result<DftSpectrum> {
    if n == 0 {
        return Err(Error::InvalidArgument("dft_shift_spectrum needs n >= 1".into()));
    }
    let table: Vec<Vec<Complex>> = (0..n).map(|k| (0..n).map(|l| root_of_unity(n, k * l)).collect()).collect();
    let mut max_residual = 0.0f64;
    for (k, row) in table.iter().enumerate() {
        let v = fourier_vector(n, k);
        let mut w = v.clone();
        for (l, &lambda) in row.iter().enumerate() {
            for (wj, vj) in w.iter().zip(&v) {
                max_residual = max_residual.max(wj.sub(lambda.mul(*vj)).modulus());
            }
            if l + 1 < n {
                w = shift(&w);
            }
        }
    }
    Ok(DftSpectrum { n, table, max_residual })
}

impl DftSpectrum {
    /// Fourier indices fixed by `τ^l`.
    pub fn invariant_frequencies(&self, l: usize, tol: f64) -> Vec<usize> {
        (0..self.n)
            .filter(|&k| self.table[k][l % self.n].sub(Complex::ONE).modulus() <= tol)
            .collect()
    }

    pub fn render(&self) -> String {
        let cells: Vec<Vec<String>> = self.table.iter().map(|r| r.iter().map(ToString::to_string).collect()).collect();
        let w = cells.iter().flatten().map(String::len).max().unwrap_or(1).max(4);
        let mut out = format!("{:<4}", "");
        for l in 0..self.n {
            out.push_str(&format!(" {:>w$}", format!("τ^{l}")));
        }
        out.push('\n');
        for (k, row) in cells.iter().enumerate() {
            out.push_str(&format!("{:<4}", format!("v{k}")));
            for c in row {
                out.push_str(&format!(" {c:>w$}"));
            }
            out.push('\n');
        }
        out
    }
}
