//! Action discretization: k-means bin centers plus continuous offsets.
//!
//! Continuous actions are split into a discrete bin (nearest center) and a
//! small residual offset, so a policy can model multi-modal action
//! distributions with a categorical head while keeping continuous precision
//! through the offset head. `decode(encode(a))` reproduces `a` up to float
//! rounding.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("cannot fit on empty action set")]
    EmptyInput,
    #[error("need at least k = {k} action rows, got {m}")]
    TooFewPoints { m: usize, k: usize },
    #[error("k must be >= 1")]
    ZeroBins,
    #[error("action length {len} not divisible by d_a = {d_a}")]
    DimensionMismatch { len: usize, d_a: usize },
    #[error("non-finite action entry at index {index}")]
    NonFinite { index: usize },
    #[error("bin {bin} out of range for {k} centers")]
    BinOutOfRange { bin: usize, k: usize },
    #[error("offset has length {len}, expected {d_a}")]
    OffsetDimMismatch { len: usize, d_a: usize },
}

/// A fitted discretizer: `k` centers of dimension `d_a`, pairwise distinct.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionCodec {
    centers: Vec<f32>, // k * d_a, row-major
    k: usize,
    d_a: usize,
}

/// Discrete-plus-continuous encoding of one action.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionEncoding {
    pub bin: usize,
    pub offset: Vec<f32>,
}

/// Diagnostics from a fit: the winning restart's squared-error trace.
#[derive(Debug, Clone)]
pub struct FitReport {
    /// Within-cluster SSE after each Lloyd update, including the initial
    /// seeding state. Non-increasing by construction.
    pub sse_history: Vec<f64>,
    /// Final within-cluster SSE.
    pub sse: f64,
    /// Lloyd iterations run by the winning restart.
    pub iterations: usize,
}

/// Number of independently seeded fits run inside [`fit`]; the lowest-SSE
/// result wins. Restart streams derive from the caller's seed, so the whole
/// procedure stays a pure function of (actions, k, seed).
const FIT_RESTARTS: u64 = 8;

pub const DEFAULT_MAX_ITERS: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-6;

impl ActionCodec {
    /// Fits centers to `actions` (M rows of `d_a`) with k-means++ seeding and
    /// Lloyd updates, ending when the largest center movement drops below
    /// `tol` or after `max_iters` passes.
    pub fn fit(
        actions: &[f32],
        d_a: usize,
        k: usize,
        seed: u64,
        max_iters: usize,
        tol: f64,
    ) -> Result<ActionCodec, CodecError> {
        Self::fit_with_report(actions, d_a, k, seed, max_iters, tol).map(|(c, _)| c)
    }

    /// [`fit`] with defaults for `max_iters` and `tol`.
    pub fn fit_default(
        actions: &[f32],
        d_a: usize,
        k: usize,
        seed: u64,
    ) -> Result<ActionCodec, CodecError> {
        Self::fit(actions, d_a, k, seed, DEFAULT_MAX_ITERS, DEFAULT_TOL)
    }

    /// [`fit`] returning the winning restart's SSE trace as well.
    pub fn fit_with_report(
        actions: &[f32],
        d_a: usize,
        k: usize,
        seed: u64,
        max_iters: usize,
        tol: f64,
    ) -> Result<(ActionCodec, FitReport), CodecError> {
        if k == 0 {
            return Err(CodecError::ZeroBins);
        }
        if d_a == 0 || actions.len() % d_a != 0 {
            return Err(CodecError::DimensionMismatch {
                len: actions.len(),
                d_a,
            });
        }
        let m = actions.len() / d_a;
        if m == 0 {
            return Err(CodecError::EmptyInput);
        }
        if m < k {
            return Err(CodecError::TooFewPoints { m, k });
        }
        if let Some(index) = actions.iter().position(|v| !v.is_finite()) {
            return Err(CodecError::NonFinite { index });
        }

        let points: Vec<f64> = actions.iter().map(|&v| v as f64).collect();
        let mut best: Option<(Vec<f64>, FitReport)> = None;
        for restart in 0..FIT_RESTARTS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(restart);
            let (centers, report) = lloyd(&points, m, d_a, k, max_iters, tol, &mut rng);
            let better = match &best {
                None => true,
                Some((_, b)) => report.sse < b.sse,
            };
            if better {
                best = Some((centers, report));
            }
        }
        let (centers64, report) = best.expect("at least one restart ran");

        // Round to f32 for storage, then drop exact duplicates (possible when
        // the data has fewer than k distinct rows), keeping first occurrence.
        let rows: Vec<Vec<f32>> = centers64
            .chunks_exact(d_a)
            .map(|row| row.iter().map(|&v| v as f32).collect())
            .collect();
        let mut kept: Vec<Vec<f32>> = Vec::new();
        for row in rows {
            if !kept.contains(&row) {
                kept.push(row);
            }
        }
        let k = kept.len();
        let centers = kept.into_iter().flatten().collect();
        Ok((ActionCodec { centers, k, d_a }, report))
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn action_dim(&self) -> usize {
        self.d_a
    }

    /// Center row for `bin`.
    pub fn center(&self, bin: usize) -> Result<&[f32], CodecError> {
        if bin >= self.k {
            return Err(CodecError::BinOutOfRange { bin, k: self.k });
        }
        Ok(&self.centers[bin * self.d_a..(bin + 1) * self.d_a])
    }

    pub fn centers(&self) -> &[f32] {
        &self.centers
    }

    /// Rebuilds a codec from raw centers (checkpoint loading).
    pub fn from_centers(centers: Vec<f32>, d_a: usize) -> Result<ActionCodec, CodecError> {
        if d_a == 0 || centers.len() % d_a != 0 {
            return Err(CodecError::DimensionMismatch {
                len: centers.len(),
                d_a,
            });
        }
        let k = centers.len() / d_a;
        if k == 0 {
            return Err(CodecError::ZeroBins);
        }
        if let Some(index) = centers.iter().position(|v| !v.is_finite()) {
            return Err(CodecError::NonFinite { index });
        }
        Ok(ActionCodec { centers, k, d_a })
    }

    /// Nearest center in squared Euclidean distance (ties to the lowest bin
    /// index) plus the residual offset.
    pub fn encode(&self, a: &[f32]) -> Result<ActionEncoding, CodecError> {
        if a.len() != self.d_a {
            return Err(CodecError::DimensionMismatch {
                len: a.len(),
                d_a: self.d_a,
            });
        }
        if let Some(index) = a.iter().position(|v| !v.is_finite()) {
            return Err(CodecError::NonFinite { index });
        }
        let mut bin = 0usize;
        let mut best = f64::INFINITY;
        for j in 0..self.k {
            let c = &self.centers[j * self.d_a..(j + 1) * self.d_a];
            let d: f64 = a
                .iter()
                .zip(c)
                .map(|(&x, &y)| {
                    let diff = x as f64 - y as f64;
                    diff * diff
                })
                .sum();
            if d < best {
                best = d;
                bin = j;
            }
        }
        let center = self.center(bin)?;
        let offset = a.iter().zip(center).map(|(&x, &c)| x - c).collect();
        Ok(ActionEncoding { bin, offset })
    }

    /// `centers[bin] + offset`.
    pub fn decode(&self, enc: &ActionEncoding) -> Result<Vec<f32>, CodecError> {
        let center = self.center(enc.bin)?;
        if enc.offset.len() != self.d_a {
            return Err(CodecError::OffsetDimMismatch {
                len: enc.offset.len(),
                d_a: self.d_a,
            });
        }
        Ok(center.iter().zip(&enc.offset).map(|(&c, &o)| c + o).collect())
    }

    /// Within-cluster SSE of `actions` against the fitted centers.
    pub fn sse(&self, actions: &[f32]) -> Result<f64, CodecError> {
        if self.d_a == 0 || actions.len() % self.d_a != 0 {
            return Err(CodecError::DimensionMismatch {
                len: actions.len(),
                d_a: self.d_a,
            });
        }
        let mut total = 0.0;
        for row in actions.chunks_exact(self.d_a) {
            let enc = self.encode(row)?;
            let c = self.center(enc.bin)?;
            total += row
                .iter()
                .zip(c)
                .map(|(&x, &y)| {
                    let d = x as f64 - y as f64;
                    d * d
                })
                .sum::<f64>();
        }
        Ok(total)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum()
}

fn point(points: &[f64], d: usize, i: usize) -> &[f64] {
    &points[i * d..(i + 1) * d]
}

/// k-means++ seeding: first center uniform, later centers drawn with
/// probability proportional to squared distance from the nearest chosen one.
fn seed_centers<R: Rng>(points: &[f64], m: usize, d: usize, k: usize, rng: &mut R) -> Vec<f64> {
    let mut centers = Vec::with_capacity(k * d);
    let first = rng.gen_range(0..m);
    centers.extend_from_slice(point(points, d, first));
    let mut d2: Vec<f64> = (0..m)
        .map(|i| sq_dist(point(points, d, i), &centers[0..d]))
        .collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let chosen = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = m - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        } else {
            // All points coincide with existing centers; any choice gives a
            // duplicate center, removed after the fit.
            rng.gen_range(0..m)
        };
        let start = centers.len();
        centers.extend_from_slice(point(points, d, chosen));
        let new = &centers[start..start + d];
        for i in 0..m {
            let nd = sq_dist(point(points, d, i), new);
            if nd < d2[i] {
                d2[i] = nd;
            }
        }
    }
    centers
}

fn assign(points: &[f64], m: usize, d: usize, centers: &[f64], k: usize) -> (Vec<usize>, f64) {
    let mut labels = vec![0usize; m];
    let mut sse = 0.0;
    for i in 0..m {
        let p = point(points, d, i);
        let mut best = f64::INFINITY;
        let mut lab = 0;
        for j in 0..k {
            let dist = sq_dist(p, &centers[j * d..(j + 1) * d]);
            if dist < best {
                best = dist;
                lab = j;
            }
        }
        labels[i] = lab;
        sse += best;
    }
    (labels, sse)
}

fn lloyd<R: Rng>(
    points: &[f64],
    m: usize,
    d: usize,
    k: usize,
    max_iters: usize,
    tol: f64,
    rng: &mut R,
) -> (Vec<f64>, FitReport) {
    let mut centers = seed_centers(points, m, d, k, rng);
    let (mut labels, mut sse) = assign(points, m, d, &centers, k);
    let mut history = vec![sse];
    let mut iterations = 0;
    for _ in 0..max_iters {
        iterations += 1;
        // Mean update.
        let mut sums = vec![0.0f64; k * d];
        let mut counts = vec![0usize; k];
        for (i, &lab) in labels.iter().enumerate() {
            counts[lab] += 1;
            for (s, &v) in sums[lab * d..(lab + 1) * d].iter_mut().zip(point(points, d, i)) {
                *s += v;
            }
        }
        let mut next = centers.clone();
        for j in 0..k {
            if counts[j] > 0 {
                for t in 0..d {
                    next[j * d + t] = sums[j * d + t] / counts[j] as f64;
                }
            } else {
                // Empty cluster: move its center onto the point that is
                // currently farthest from its own assigned center. Ties go to
                // the lowest point index.
                let mut worst = 0usize;
                let mut worst_d = -1.0;
                for i in 0..m {
                    let dist = sq_dist(point(points, d, i), &centers[labels[i] * d..(labels[i] + 1) * d]);
                    if dist > worst_d {
                        worst_d = dist;
                        worst = i;
                    }
                }
                next[j * d..(j + 1) * d].copy_from_slice(point(points, d, worst));
            }
        }
        let movement = (0..k)
            .map(|j| sq_dist(&centers[j * d..(j + 1) * d], &next[j * d..(j + 1) * d]).sqrt())
            .fold(0.0f64, f64::max);
        centers = next;
        let (new_labels, new_sse) = assign(points, m, d, &centers, k);
        labels = new_labels;
        sse = new_sse;
        history.push(sse);
        if movement < tol {
            break;
        }
    }
    (
        centers,
        FitReport {
            sse_history: history,
            sse,
            iterations,
        },
    )
}
