//! Benchmark tasks and the training harness.
//!
//! Two task families exercise the layer stack end to end: an O(n)-invariant
//! scalar regression on pairs of points, and convex-hull volume estimation
//! from point clouds. Both come with deterministic generators and oracles
//! (closed form, exact incremental hull in three dimensions, Monte-Carlo
//! with a standard-error estimate above that). The module also provides the
//! Adam training loop, a coordinate-MLP baseline, and an equivariance audit
//! that measures symmetry violations layer by layer.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::algebra::{Multivector, Signature};
use crate::autodiff::{AdamParams, AdamState, Tape, Tensor, Var};
use crate::error::Error;
use crate::groups::{orthogonal_to_versor, random_multivector, random_restricted_orthogonal, sample_lipschitz_rng};
use crate::layers::{batch_from_multivectors, tensor_rel_diff, transform_batch, LayerKind, Model};
use crate::Result;

/// Per-sample stream seed. Multiplying the index by an odd constant keeps
/// the mapping injective, so sample i depends only on (seed, i) and any
/// prefix of a longer dataset is reproducible.
fn stream_seed(seed: u64, i: u64) -> u64 {
    seed ^ i.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

fn euclidean_norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

// ---------------------------------------------------------------------------
// Invariant scalar regression
// ---------------------------------------------------------------------------

/// One regression sample: two points and the rotation-invariant target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionSample {
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
    pub target: f64,
}

/// Smooth O(n)-invariant function of two points:
/// sin(|x1|) - |x2|^3 / 2 + <x1, x2> / (|x1| |x2|).
pub fn regression_target(x1: &[f64], x2: &[f64]) -> f64 {
    let n1 = euclidean_norm(x1);
    let n2 = euclidean_norm(x2);
    n1.sin() - n2.powi(3) / 2.0 + dot(x1, x2) / (n1 * n2)
}

fn sample_point<R: Rng>(d: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let x: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        // The target divides by both norms; resample the measure-zero case.
        if euclidean_norm(&x) >= 1e-12 {
            return x;
        }
    }
}

/// Deterministic regression dataset of `count` samples in dimension `d`,
/// points drawn from the standard normal.
pub fn gen_regression(seed: u64, count: usize, d: usize) -> Vec<RegressionSample> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha20Rng::seed_from_u64(stream_seed(seed, i as u64));
            let x1 = sample_point(d, &mut rng);
            let x2 = sample_point(d, &mut rng);
            let target = regression_target(&x1, &x2);
            RegressionSample { x1, x2, target }
        })
        .collect()
}

/// Embed regression samples as two grade-1 channels. Returns the input
/// batch [B, 2, 2^n] and the targets [B, 1].
pub fn regression_batch(sig: Signature, samples: &[RegressionSample]) -> Result<(Tensor, Tensor)> {
    let d = sig.n();
    let mut rows = Vec::with_capacity(samples.len());
    let mut targets = Vec::with_capacity(samples.len());
    for s in samples {
        if s.x1.len() != d || s.x2.len() != d {
            return Err(Error::Config(format!(
                "sample dimension {} does not match {} generators",
                s.x1.len(),
                d
            )));
        }
        rows.push(vec![Multivector::vector(sig, &s.x1)?, Multivector::vector(sig, &s.x2)?]);
        targets.push(s.target);
    }
    let y = Tensor::from_vec(&[samples.len(), 1], targets);
    Ok((batch_from_multivectors(sig, &rows), y))
}

/// Raw grade-1 coordinates of every channel, flattened to [B, C * n].
/// This is the feature view consumed by the coordinate-MLP baseline.
pub fn vector_features(sig: Signature, x: &Tensor) -> Tensor {
    let (b, c, dim) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let n = sig.n();
    let mut data = Vec::with_capacity(b * c * n);
    for t in 0..b {
        for ch in 0..c {
            let base = (t * c + ch) * dim;
            for g in 0..n {
                data.push(x.data()[base + (1usize << g)]);
            }
        }
    }
    Tensor::from_vec(&[b, c * n], data)
}

/// Write regression samples as CSV with header x1_0..,x2_0..,target.
/// Floats use the shortest representation that parses back exactly, so a
/// write/read cycle is lossless and repeated writes are byte-identical.
pub fn write_regression_csv<W: std::io::Write>(w: W, samples: &[RegressionSample]) -> Result<()> {
    let d = match samples.first() {
        Some(s) => s.x1.len(),
        None => return Err(Error::Config("cannot write an empty dataset".into())),
    };
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(regression_header(d))?;
    for s in samples {
        let mut rec: Vec<String> = s.x1.iter().chain(&s.x2).map(f64::to_string).collect();
        rec.push(s.target.to_string());
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

fn regression_header(d: usize) -> Vec<String> {
    let mut h: Vec<String> = (0..d).map(|i| format!("x1_{i}")).collect();
    h.extend((0..d).map(|i| format!("x2_{i}")));
    h.push("target".into());
    h
}

pub fn read_regression_csv<R: std::io::Read>(r: R) -> Result<Vec<RegressionSample>> {
    let mut rdr = csv::Reader::from_reader(r);
    let headers = rdr.headers()?.clone();
    let cols = headers.len();
    if cols < 3 || cols % 2 == 0 {
        return Err(Error::Parse(format!("unexpected column count {cols} in regression csv")));
    }
    let d = (cols - 1) / 2;
    let expected = regression_header(d);
    if headers.iter().ne(expected.iter().map(String::as_str)) {
        return Err(Error::Parse("regression csv header does not match the expected layout".into()));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let field = |i: usize| -> Result<f64> {
            rec.get(i)
                .ok_or_else(|| Error::Parse(format!("missing field {i}")))?
                .parse::<f64>()
                .map_err(|e| Error::Parse(format!("bad float in csv: {e}")))
        };
        let x1 = (0..d).map(&field).collect::<Result<Vec<f64>>>()?;
        let x2 = (d..2 * d).map(&field).collect::<Result<Vec<f64>>>()?;
        out.push(RegressionSample { x1, x2, target: field(2 * d)? });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Convex-hull volume
// ---------------------------------------------------------------------------

/// One hull sample: K points and the hull volume. Three-dimensional sets
/// carry the exact volume (volume_std = 0); higher dimensions carry a
/// Monte-Carlo estimate with its standard error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HullSample {
    pub points: Vec<Vec<f64>>,
    pub volume: f64,
    pub volume_std: f64,
}

fn sub3(a: &[f64], b: &[f64]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

struct Face {
    v: [usize; 3],
    /// Outward unit normal and plane offset: n . x = off on the face plane.
    n: [f64; 3],
    off: f64,
}

fn make_face(points: &[Vec<f64>], a: usize, b: usize, c: usize, interior: [f64; 3]) -> Option<Face> {
    let e1 = sub3(&points[b], &points[a]);
    let e2 = sub3(&points[c], &points[a]);
    let raw = cross3(e1, e2);
    let len = dot3(raw, raw).sqrt();
    if len < 1e-14 {
        return None;
    }
    let mut n = [raw[0] / len, raw[1] / len, raw[2] / len];
    let mut v = [a, b, c];
    let pa = [points[a][0], points[a][1], points[a][2]];
    let mut off = dot3(n, pa);
    if dot3(n, interior) > off {
        n = [-n[0], -n[1], -n[2]];
        off = -off;
        v = [a, c, b];
    }
    Some(Face { v, n, off })
}

/// Exact convex-hull volume in three dimensions via incremental insertion.
/// Returns (volume, degenerate); point sets that are affinely dependent
/// within tolerance are flagged degenerate with zero volume.
pub fn hull_volume_3d(points: &[Vec<f64>]) -> (f64, bool) {
    assert!(points.iter().all(|p| p.len() == 3), "three coordinates per point");
    if points.len() < 4 {
        return (0.0, true);
    }
    let scale = points
        .iter()
        .flat_map(|p| p.iter())
        .fold(0.0f64, |m, c| m.max(c.abs()))
        .max(1e-300);
    let eps = 1e-9 * scale;

    // Initial simplex by farthest-point sweeps: a point far from the first,
    // then far from their line, then far from their plane.
    let v0 = 0usize;
    let (v1, d1) = (0..points.len())
        .map(|j| (j, euclidean_norm(&sub3(&points[j], &points[v0]))))
        .fold((v0, 0.0), |best, cand| if cand.1 > best.1 { cand } else { best });
    if d1 <= eps {
        return (0.0, true);
    }
    let axis = sub3(&points[v1], &points[v0]);
    let (v2, d2) = (0..points.len())
        .map(|j| {
            let c = cross3(axis, sub3(&points[j], &points[v0]));
            (j, dot3(c, c).sqrt())
        })
        .fold((v0, 0.0), |best, cand| if cand.1 > best.1 { cand } else { best });
    if d2 <= eps * d1 {
        return (0.0, true);
    }
    let plane_n = cross3(axis, sub3(&points[v2], &points[v0]));
    let (v3, d3) = (0..points.len())
        .map(|j| (j, dot3(plane_n, sub3(&points[j], &points[v0])).abs()))
        .fold((v0, 0.0), |best, cand| if cand.1 > best.1 { cand } else { best });
    if d3 <= eps * d2 {
        return (0.0, true);
    }

    let interior = [
        (points[v0][0] + points[v1][0] + points[v2][0] + points[v3][0]) / 4.0,
        (points[v0][1] + points[v1][1] + points[v2][1] + points[v3][1]) / 4.0,
        (points[v0][2] + points[v1][2] + points[v2][2] + points[v3][2]) / 4.0,
    ];
    let mut faces = Vec::new();
    for (a, b, c) in [(v0, v1, v2), (v0, v1, v3), (v0, v2, v3), (v1, v2, v3)] {
        match make_face(points, a, b, c, interior) {
            Some(f) => faces.push(f),
            None => return (0.0, true),
        }
    }

    let seed_set = [v0, v1, v2, v3];
    for p in 0..points.len() {
        if seed_set.contains(&p) {
            continue;
        }
        let pt = [points[p][0], points[p][1], points[p][2]];
        let visible: Vec<usize> =
            (0..faces.len()).filter(|&i| dot3(faces[i].n, pt) - faces[i].off > eps).collect();
        if visible.is_empty() {
            continue;
        }
        // Horizon: directed edges of the visible region whose reverse is not
        // itself part of the visible region.
        let mut edges = Vec::new();
        for &i in &visible {
            let [a, b, c] = faces[i].v;
            edges.extend_from_slice(&[(a, b), (b, c), (c, a)]);
        }
        let horizon: Vec<(usize, usize)> =
            edges.iter().copied().filter(|&(a, b)| !edges.contains(&(b, a))).collect();
        let mut keep: Vec<Face> = Vec::with_capacity(faces.len());
        for (i, f) in faces.into_iter().enumerate() {
            if !visible.contains(&i) {
                keep.push(f);
            }
        }
        faces = keep;
        for (a, b) in horizon {
            match make_face(points, a, b, p, interior) {
                Some(f) => faces.push(f),
                None => return (0.0, true),
            }
        }
    }

    // Fan integration from the interior point over the outward-oriented
    // boundary triangles.
    let mut volume = 0.0;
    for f in &faces {
        let a = sub3(&points[f.v[0]], &interior);
        let b = sub3(&points[f.v[1]], &interior);
        let c = sub3(&points[f.v[2]], &interior);
        volume += dot3(cross3(a, b), c) / 6.0;
    }
    (volume, false)
}

/// Affine rank of a point set (rank of the differences to the first point),
/// by Gaussian elimination with partial pivoting.
fn affine_rank(points: &[Vec<f64>]) -> usize {
    if points.len() < 2 {
        return 0;
    }
    let d = points[0].len();
    let mut rows: Vec<Vec<f64>> =
        points[1..].iter().map(|p| p.iter().zip(&points[0]).map(|(a, b)| a - b).collect()).collect();
    let scale = rows
        .iter()
        .flat_map(|r| r.iter())
        .fold(0.0f64, |m, c| m.max(c.abs()))
        .max(1e-300);
    let tol = 1e-9 * scale;
    let mut rank = 0;
    for col in 0..d {
        let Some(pivot) = (rank..rows.len()).max_by(|&a, &b| {
            rows[a][col].abs().partial_cmp(&rows[b][col].abs()).expect("finite pivots")
        }) else {
            break;
        };
        if rows[pivot][col].abs() <= tol {
            continue;
        }
        rows.swap(rank, pivot);
        for r in rank + 1..rows.len() {
            let f = rows[r][col] / rows[rank][col];
            for c in col..d {
                rows[r][c] -= f * rows[rank][c];
            }
        }
        rank += 1;
        if rank == rows.len() {
            break;
        }
    }
    rank
}

/// Phase-1 simplex for "x lies in the convex hull of the points". On an
/// infeasible outcome the returned vector is a Farkas direction g with
/// g . x > max_j g . p_j (before normalization and re-verification).
fn convex_feasible(points: &[Vec<f64>], x: &[f64]) -> (bool, Option<Vec<f64>>) {
    let d = x.len();
    let k = points.len();
    let m = d + 1;
    let cols = k + m + 1;
    let mut tab = vec![vec![0.0f64; cols]; m + 1];
    let mut flipped = vec![false; m];
    for i in 0..m {
        for j in 0..k {
            tab[i][j] = if i < d { points[j][i] } else { 1.0 };
        }
        tab[i][cols - 1] = if i < d { x[i] } else { 1.0 };
        if tab[i][cols - 1] < 0.0 {
            flipped[i] = true;
            for j in 0..cols {
                tab[i][j] = -tab[i][j];
            }
        }
        tab[i][k + i] = 1.0;
    }
    // Reduced-cost row for minimizing the artificial sum, priced out
    // against the all-artificial starting basis. The corner cell tracks
    // the negated objective.
    for j in 0..k {
        tab[m][j] = -(0..m).map(|i| tab[i][j]).sum::<f64>();
    }
    tab[m][cols - 1] = -(0..m).map(|i| tab[i][cols - 1]).sum::<f64>();

    let piv_tol = 1e-11;
    let mut basis: Vec<usize> = (k..k + m).collect();
    for _ in 0..200 * (k + m) {
        // Bland's rule: lowest-index entering column, lowest-index basic
        // variable on ratio ties. Guarantees termination.
        let Some(enter) = (0..cols - 1).find(|&j| tab[m][j] < -piv_tol) else {
            break;
        };
        let mut leave: Option<usize> = None;
        let mut best = f64::INFINITY;
        for i in 0..m {
            if tab[i][enter] > piv_tol {
                let ratio = tab[i][cols - 1] / tab[i][enter];
                if ratio < best - piv_tol
                    || (ratio < best + piv_tol && leave.map_or(true, |l| basis[i] < basis[l]))
                {
                    best = best.min(ratio);
                    leave = Some(i);
                }
            }
        }
        let Some(leave) = leave else {
            break;
        };
        let pv = tab[leave][enter];
        for j in 0..cols {
            tab[leave][j] /= pv;
        }
        for r in 0..m + 1 {
            if r != leave && tab[r][enter].abs() > 0.0 {
                let f = tab[r][enter];
                for j in 0..cols {
                    tab[r][j] -= f * tab[leave][j];
                }
            }
        }
        basis[leave] = enter;
    }

    let objective = -tab[m][cols - 1];
    if objective <= 1e-9 {
        return (true, None);
    }
    let mut g = vec![0.0; d];
    for (i, gi) in g.iter_mut().enumerate() {
        let y = 1.0 - tab[m][k + i];
        *gi = if flipped[i] { -y } else { y };
    }
    (false, Some(g))
}

/// Convex-hull membership with three tiers: a bounding-ball reject, cached
/// separating-direction certificates, and a full feasibility solve.
pub struct HullMembership {
    points: Vec<Vec<f64>>,
    centroid: Vec<f64>,
    radius2: f64,
    /// Certificates (g, max_j g . p_j); a query with g . x above the cached
    /// maximum is outside. Every entry is re-verified before insertion, so
    /// cache hits never depend on solver internals.
    cache: Vec<(Vec<f64>, f64)>,
}

const CERT_CACHE_CAP: usize = 64;

impl HullMembership {
    pub fn new(points: &[Vec<f64>]) -> HullMembership {
        assert!(!points.is_empty(), "membership needs at least one point");
        let d = points[0].len();
        let mut centroid = vec![0.0; d];
        for p in points {
            for (c, v) in centroid.iter_mut().zip(p) {
                *c += v;
            }
        }
        for c in centroid.iter_mut() {
            *c /= points.len() as f64;
        }
        let radius2 = points
            .iter()
            .map(|p| p.iter().zip(&centroid).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .fold(0.0, f64::max);
        HullMembership { points: points.to_vec(), centroid, radius2, cache: Vec::new() }
    }

    pub fn contains(&mut self, x: &[f64]) -> bool {
        let d2: f64 = x.iter().zip(&self.centroid).map(|(a, b)| (a - b) * (a - b)).sum();
        if d2 > self.radius2 * (1.0 + 1e-12) + 1e-30 {
            return false;
        }
        for (g, h) in &self.cache {
            if dot(g, x) > h + 1e-9 {
                return false;
            }
        }
        let (feasible, certificate) = convex_feasible(&self.points, x);
        if feasible {
            return true;
        }
        if let Some(g) = certificate {
            let norm = euclidean_norm(&g);
            if norm > 1e-12 {
                let g: Vec<f64> = g.iter().map(|v| v / norm).collect();
                let h = self.points.iter().map(|p| dot(&g, p)).fold(f64::NEG_INFINITY, f64::max);
                if dot(&g, x) > h + 1e-9 {
                    if self.cache.len() >= CERT_CACHE_CAP {
                        self.cache.remove(0);
                    }
                    self.cache.push((g, h));
                }
            }
        }
        false
    }
}

/// Monte-Carlo hull volume via rejection sampling in the bounding box.
/// Returns (volume, standard error). Affinely dependent point sets report
/// (0, 0) exactly.
pub fn hull_volume_mc(points: &[Vec<f64>], n_samples: usize, seed: u64) -> (f64, f64) {
    assert!(n_samples > 0, "at least one sample");
    let d = points[0].len();
    if affine_rank(points) < d {
        return (0.0, 0.0);
    }
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for p in points {
        for c in 0..d {
            lo[c] = lo[c].min(p[c]);
            hi[c] = hi[c].max(p[c]);
        }
    }
    let box_vol: f64 = (0..d).map(|c| hi[c] - lo[c]).product();
    let mut member = HullMembership::new(points);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    let mut probe = vec![0.0; d];
    for _ in 0..n_samples {
        for c in 0..d {
            probe[c] = rng.gen_range(lo[c]..=hi[c]);
        }
        if member.contains(&probe) {
            hits += 1;
        }
    }
    let p_hat = hits as f64 / n_samples as f64;
    (box_vol * p_hat, box_vol * (p_hat * (1.0 - p_hat) / n_samples as f64).sqrt())
}

/// Deterministic hull dataset: `k` standard-normal points in dimension `d`
/// per sample. d = 3 uses the exact volume; other dimensions estimate it
/// with `n_mc` Monte-Carlo samples. Degenerate draws are resampled from the
/// same per-sample stream.
pub fn gen_hull(seed: u64, count: usize, d: usize, k: usize, n_mc: usize) -> Vec<HullSample> {
    assert!(k > d, "need more points than dimensions for a solid hull");
    (0..count)
        .map(|i| {
            let mut rng = ChaCha20Rng::seed_from_u64(stream_seed(seed, i as u64));
            loop {
                let points: Vec<Vec<f64>> = (0..k)
                    .map(|_| (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
                    .collect();
                if d == 3 {
                    let (volume, degenerate) = hull_volume_3d(&points);
                    if !degenerate && volume > 0.0 {
                        break HullSample { points, volume, volume_std: 0.0 };
                    }
                } else {
                    let mc_seed: u64 = rng.gen();
                    let (volume, volume_std) = hull_volume_mc(&points, n_mc, mc_seed);
                    if volume > 0.0 {
                        break HullSample { points, volume, volume_std };
                    }
                }
            }
        })
        .collect()
}

/// Embed hull samples with one grade-1 channel per point. Returns the input
/// batch [B, K, 2^n] and the volumes [B, 1].
///
/// Points are centered on their centroid before embedding: the volume is
/// translation invariant, and the centroid commutes with the group action,
/// so centering keeps the embedding equivariant. Channels are then ordered
/// by decreasing centered norm, which is rotation invariant, removing the
/// permutation ambiguity of the raw point set.
pub fn hull_batch(sig: Signature, samples: &[HullSample]) -> Result<(Tensor, Tensor)> {
    let d = sig.n();
    let k = samples.first().map_or(0, |s| s.points.len());
    let mut rows = Vec::with_capacity(samples.len());
    let mut targets = Vec::with_capacity(samples.len());
    for s in samples {
        if s.points.len() != k {
            return Err(Error::Config(format!(
                "inconsistent point counts: {} vs {k}",
                s.points.len()
            )));
        }
        for p in &s.points {
            if p.len() != d {
                return Err(Error::Config(format!(
                    "point dimension {} does not match {} generators",
                    p.len(),
                    d
                )));
            }
        }
        let mut centroid = vec![0.0; d];
        for p in &s.points {
            for (c, v) in centroid.iter_mut().zip(p) {
                *c += v / k as f64;
            }
        }
        let mut ordered: Vec<Vec<f64>> = s
            .points
            .iter()
            .map(|p| p.iter().zip(&centroid).map(|(v, c)| v - c).collect())
            .collect();
        ordered.sort_by(|a, b| euclidean_norm(b).total_cmp(&euclidean_norm(a)));
        let row = ordered
            .iter()
            .map(|p| Multivector::vector(sig, p))
            .collect::<Result<Vec<Multivector>>>()?;
        rows.push(row);
        targets.push(s.volume);
    }
    let y = Tensor::from_vec(&[samples.len(), 1], targets);
    Ok((batch_from_multivectors(sig, &rows), y))
}

fn hull_header(k: usize, d: usize) -> Vec<String> {
    let mut h = Vec::with_capacity(k * d + 2);
    for j in 0..k {
        for c in 0..d {
            h.push(format!("p{j}_{c}"));
        }
    }
    h.push("volume".into());
    h.push("volume_std".into());
    h
}

/// Write hull samples as CSV with header p0_0..p{K-1}_{d-1},volume,volume_std.
pub fn write_hull_csv<W: std::io::Write>(w: W, samples: &[HullSample]) -> Result<()> {
    let (k, d) = match samples.first() {
        Some(s) => (s.points.len(), s.points[0].len()),
        None => return Err(Error::Config("cannot write an empty dataset".into())),
    };
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(hull_header(k, d))?;
    for s in samples {
        let mut rec: Vec<String> =
            s.points.iter().flat_map(|p| p.iter().map(f64::to_string)).collect();
        rec.push(s.volume.to_string());
        rec.push(s.volume_std.to_string());
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_hull_csv<R: std::io::Read>(r: R) -> Result<Vec<HullSample>> {
    let mut rdr = csv::Reader::from_reader(r);
    let headers = rdr.headers()?.clone();
    let cols = headers.len();
    let mut k = 0usize;
    let mut d = 0usize;
    for name in headers.iter().take(cols.saturating_sub(2)) {
        let Some((j, c)) = name
            .strip_prefix('p')
            .and_then(|s| s.split_once('_'))
            .and_then(|(a, b)| Some((a.parse::<usize>().ok()?, b.parse::<usize>().ok()?)))
        else {
            return Err(Error::Parse(format!("unexpected column name {name} in hull csv")));
        };
        k = k.max(j + 1);
        d = d.max(c + 1);
    }
    if k == 0 || d == 0 || headers.iter().ne(hull_header(k, d).iter().map(String::as_str)) {
        return Err(Error::Parse("hull csv header does not match the expected layout".into()));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let field = |i: usize| -> Result<f64> {
            rec.get(i)
                .ok_or_else(|| Error::Parse(format!("missing field {i}")))?
                .parse::<f64>()
                .map_err(|e| Error::Parse(format!("bad float in csv: {e}")))
        };
        let mut points = Vec::with_capacity(k);
        for j in 0..k {
            points.push((0..d).map(|c| field(j * d + c)).collect::<Result<Vec<f64>>>()?);
        }
        out.push(HullSample { points, volume: field(k * d)?, volume_std: field(k * d + 1)? });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Embedded train/test splits: inputs [B, C, 2^n], scalar targets [B, 1].
pub struct TaskData {
    pub x_train: Tensor,
    pub y_train: Tensor,
    pub x_test: Tensor,
    pub y_test: Tensor,
}

pub fn regression_task_data(
    sig: Signature,
    train: &[RegressionSample],
    test: &[RegressionSample],
) -> Result<TaskData> {
    let (x_train, y_train) = regression_batch(sig, train)?;
    let (x_test, y_test) = regression_batch(sig, test)?;
    Ok(TaskData { x_train, y_train, x_test, y_test })
}

pub fn hull_task_data(sig: Signature, train: &[HullSample], test: &[HullSample]) -> Result<TaskData> {
    let (x_train, y_train) = hull_batch(sig, train)?;
    let (x_test, y_test) = hull_batch(sig, test)?;
    Ok(TaskData { x_train, y_train, x_test, y_test })
}

/// Test MSE of always predicting the training-set mean. The floor any
/// useful model has to beat.
pub fn constant_mean_mse(y_train: &Tensor, y_test: &Tensor) -> f64 {
    let n = y_train.len().max(1) as f64;
    let mean = y_train.data().iter().sum::<f64>() / n;
    let m = y_test.len().max(1) as f64;
    y_test.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub channels: usize,
    pub depth: usize,
    /// Cosine-decay the learning rate from `lr` down to this floor over the
    /// scheduled step count; absent means a constant rate.
    pub lr_min: Option<f64>,
    /// Decoupled weight decay applied by the optimizer; zero disables it.
    pub weight_decay: f64,
    /// Hidden width of the scalar gate before the readout; zero disables it.
    pub scalar_gate_hidden: usize,
    /// Stop once the test MSE reaches this level.
    pub stop_at_test_mse: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            seed: 0,
            epochs: 30,
            batch_size: 32,
            lr: 3e-3,
            channels: 8,
            depth: 2,
            lr_min: None,
            weight_decay: 0.0,
            scalar_gate_hidden: 16,
            stop_at_test_mse: None,
        }
    }
}

/// Metrics after one pass over the training set. MSE values are reported
/// in original target units regardless of internal standardization. The
/// epoch-0 entry echoes the untrained model.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub step: u64,
    pub train_mse: f64,
    pub test_mse: f64,
    pub wall_s: f64,
}

pub struct TrainResult {
    pub model: Model,
    pub metrics: Vec<EpochMetrics>,
    /// Optimizer and standardization state as of the last completed epoch,
    /// ready to checkpoint. `state.y_mean` / `state.y_std` are also what
    /// [`predict`] needs to report in original units.
    pub state: ResumeState,
}

/// Layer stack shared by the trainer and the parameter-count comparison:
/// depth blocks of mix / normalize / multiply, an optional scalar gate on
/// the last block's channels, and a single-channel readout mix.
/// `grade_wise` swaps each type-grouped layer for its grade-grouped
/// counterpart (which has no norm or gate analogue).
pub fn build_layer_stack(
    in_channels: usize,
    channels: usize,
    depth: usize,
    gate_hidden: usize,
    grade_wise: bool,
) -> Vec<LayerKind> {
    let mut layers = Vec::new();
    let mut c = in_channels;
    for _ in 0..depth {
        if grade_wise {
            layers.push(LayerKind::GradeLinear { c_in: c, c_out: channels });
            layers.push(LayerKind::GradeProduct { channels });
        } else {
            layers.push(LayerKind::QtLinear { c_in: c, c_out: channels });
            layers.push(LayerKind::QtNorm { channels });
            layers.push(LayerKind::QtProduct { channels });
        }
        c = channels;
    }
    if grade_wise {
        layers.push(LayerKind::GradeLinear { c_in: c, c_out: 1 });
    } else {
        if gate_hidden > 0 {
            layers.push(LayerKind::ScalarGate { channels: c, hidden: gate_hidden });
        }
        layers.push(LayerKind::QtLinear { c_in: c, c_out: 1 });
    }
    layers
}

/// Standard task model: depth blocks of mix / normalize / multiply, an
/// optional scalar gate, then a single-channel readout mix. The prediction
/// is the scalar coefficient of the output channel.
pub fn build_model(sig: Signature, in_channels: usize, cfg: &TrainConfig) -> Result<Model> {
    let layers =
        build_layer_stack(in_channels, cfg.channels, cfg.depth, cfg.scalar_gate_hidden, false);
    Model::new(sig, in_channels, layers, cfg.seed)
}

fn target_stats(y: &Tensor) -> (f64, f64) {
    let n = y.len().max(1) as f64;
    let mean = y.data().iter().sum::<f64>() / n;
    let var = y.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt().max(1e-12))
}

fn standardized(y: &Tensor, mean: f64, std: f64) -> Tensor {
    Tensor::from_vec(&y.shape().to_vec(), y.data().iter().map(|v| (v - mean) / std).collect())
}

fn gather_rows(x: &Tensor, idx: &[usize]) -> Tensor {
    let row = x.len() / x.shape()[0];
    let mut shape = x.shape().to_vec();
    shape[0] = idx.len();
    let mut data = Vec::with_capacity(idx.len() * row);
    for &i in idx {
        data.extend_from_slice(&x.data()[i * row..(i + 1) * row]);
    }
    Tensor::from_vec(&shape, data)
}

/// Predictions in original target units: the scalar coefficient of the
/// single output channel, de-standardized. Shape [B, 1].
pub fn predict(model: &Model, x: &Tensor, y_mean: f64, y_std: f64) -> Result<Tensor> {
    if model.out_channels() != 1 {
        return Err(Error::Config("prediction requires a single output channel".into()));
    }
    let out = model.forward(x);
    let d = out.shape()[2];
    let rows = out.shape()[0];
    let data: Vec<f64> = (0..rows).map(|t| y_mean + y_std * out.data()[t * d]).collect();
    let t = Tensor::from_vec(&[rows, 1], data);
    if !t.is_finite() {
        return Err(Error::NonFinite("prediction"));
    }
    Ok(t)
}

/// Mean squared error of [`predict`] against targets in original units.
pub fn eval_mse(model: &Model, x: &Tensor, y: &Tensor, y_mean: f64, y_std: f64) -> Result<f64> {
    let pred = predict(model, x, y_mean, y_std)?;
    let n = y.len().max(1) as f64;
    Ok(pred.data().iter().zip(y.data()).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n)
}

/// Build the standard model for `cfg` and train it on `data`.
pub fn train(sig: Signature, in_channels: usize, cfg: &TrainConfig, data: &TaskData) -> Result<TrainResult> {
    let model = build_model(sig, in_channels, cfg)?;
    train_from(model, cfg, data)
}

/// Everything a checkpoint must carry to continue a run as if it had never
/// stopped: the optimizer moments, the epoch already completed, and the
/// target standardization frozen at the original run's statistics.
pub struct ResumeState {
    pub start_epoch: usize,
    pub adam_step: u64,
    pub adam_m: Vec<Tensor>,
    pub adam_v: Vec<Tensor>,
    pub y_mean: f64,
    pub y_std: f64,
}

/// Adam training loop over standardized targets. Deterministic for a fixed
/// config and dataset: per-epoch shuffles are seeded, and every reduction
/// runs in a fixed order.
pub fn train_from(model: Model, cfg: &TrainConfig, data: &TaskData) -> Result<TrainResult> {
    train_from_state(model, cfg, data, None)
}

/// As [`train_from`], optionally continuing from a checkpointed state.
/// Because shuffles are keyed by (seed, epoch) and the optimizer moments
/// travel with the checkpoint, a resumed run reproduces the uninterrupted
/// run exactly.
pub fn train_from_state(
    mut model: Model,
    cfg: &TrainConfig,
    data: &TaskData,
    resume: Option<ResumeState>,
) -> Result<TrainResult> {
    let n_rows = data.x_train.shape()[0];
    if n_rows == 0 {
        return Err(Error::Config("empty training split".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let hp = AdamParams { lr: cfg.lr, weight_decay: cfg.weight_decay, ..AdamParams::default() };
    let mask = model.decay_mask();
    let (start_epoch, mut opt, y_mean, y_std) = match resume {
        None => {
            let (mean, std) = target_stats(&data.y_train);
            (0, AdamState::new(hp, model.params()).with_decay_mask(mask), mean, std)
        }
        Some(state) => {
            if state.start_epoch > cfg.epochs {
                return Err(Error::Config(format!(
                    "checkpoint is at epoch {}, past the configured {}",
                    state.start_epoch, cfg.epochs
                )));
            }
            let opt = AdamState::restore(hp, state.adam_step, state.adam_m, state.adam_v)
                .with_decay_mask(mask);
            (state.start_epoch, opt, state.y_mean, state.y_std)
        }
    };
    let yz_train = standardized(&data.y_train, y_mean, y_std);
    let start = Instant::now();
    let mut metrics = Vec::with_capacity(cfg.epochs - start_epoch + 1);
    let echo = EpochMetrics {
        epoch: start_epoch,
        step: opt.step_count(),
        train_mse: eval_mse(&model, &data.x_train, &data.y_train, y_mean, y_std)?,
        test_mse: eval_mse(&model, &data.x_test, &data.y_test, y_mean, y_std)?,
        wall_s: start.elapsed().as_secs_f64(),
    };
    let mut stop = cfg.stop_at_test_mse.is_some_and(|s| echo.test_mse <= s);
    metrics.push(echo);
    let total_steps = (n_rows.div_ceil(cfg.batch_size) * cfg.epochs).max(1);
    for epoch in start_epoch + 1..=cfg.epochs {
        if stop {
            break;
        }
        let mut order: Vec<usize> = (0..n_rows).collect();
        order.shuffle(&mut ChaCha20Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64)));
        for chunk in order.chunks(cfg.batch_size) {
            if let Some(lo) = cfg.lr_min {
                // Completed-step fraction: the first step runs at the full rate.
                let frac = (opt.step_count() as f64 / total_steps as f64).min(1.0);
                opt.set_lr(lo + 0.5 * (cfg.lr - lo) * (1.0 + (std::f64::consts::PI * frac).cos()));
            }
            let xb = gather_rows(&data.x_train, chunk);
            let yb = gather_rows(&yz_train, chunk);
            let mut tape = Tape::new();
            let xv = tape.leaf(xb);
            let (out, pvars) = model.forward_on_tape(&mut tape, xv);
            let pred = tape.take_blade(out, 0);
            let yv = tape.leaf(yb);
            let diff = tape.sub(pred, yv);
            let sq = tape.square(diff);
            let loss = tape.mean(sq);
            if !tape.value(loss).item().is_finite() {
                return Err(Error::NonFinite("training loss"));
            }
            let grads = tape.backward(loss);
            let gvec: Vec<Tensor> = pvars
                .iter()
                .zip(model.params())
                .map(|(v, p)| grads.dense(*v, p.shape()))
                .collect();
            opt.step(model.params_mut(), &gvec);
        }
        let entry = EpochMetrics {
            epoch,
            step: opt.step_count(),
            train_mse: eval_mse(&model, &data.x_train, &data.y_train, y_mean, y_std)?,
            test_mse: eval_mse(&model, &data.x_test, &data.y_test, y_mean, y_std)?,
            wall_s: start.elapsed().as_secs_f64(),
        };
        stop = cfg.stop_at_test_mse.is_some_and(|s| entry.test_mse <= s);
        metrics.push(entry);
    }
    let (adam_step, adam_m, adam_v) = opt.snapshot();
    let state = ResumeState {
        start_epoch: metrics.last().map_or(start_epoch, |m| m.epoch),
        adam_step,
        adam_m,
        adam_v,
        y_mean,
        y_std,
    };
    Ok(TrainResult { model, metrics, state })
}

// ---------------------------------------------------------------------------
// Coordinate-MLP baseline
// ---------------------------------------------------------------------------

pub struct MlpResult {
    pub params: Vec<Tensor>,
    pub metrics: Vec<EpochMetrics>,
    pub y_mean: f64,
    pub y_std: f64,
}

fn mlp_forward(tape: &mut Tape, pv: &[Var], x: Var) -> Var {
    let h = tape.matmul(x, pv[0]);
    let h = tape.add_bias(h, pv[1]);
    let h = tape.silu(h);
    let h = tape.matmul(h, pv[2]);
    let h = tape.add_bias(h, pv[3]);
    let h = tape.silu(h);
    let o = tape.matmul(h, pv[4]);
    tape.add_bias(o, pv[5])
}

fn mlp_eval(params: &[Tensor], x: &Tensor, y: &Tensor, y_mean: f64, y_std: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let pv: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let xv = tape.leaf(x.clone());
    let out = mlp_forward(&mut tape, &pv, xv);
    let n = y.len().max(1) as f64;
    let mse = tape
        .value(out)
        .data()
        .iter()
        .zip(y.data())
        .map(|(p, t)| {
            let orig = y_mean + y_std * p;
            (orig - t) * (orig - t)
        })
        .sum::<f64>()
        / n;
    if !mse.is_finite() {
        return Err(Error::NonFinite("baseline evaluation"));
    }
    Ok(mse)
}

/// Plain two-hidden-layer MLP on raw coordinate features [B, F], trained
/// with the same optimizer, schedule, and target standardization as the
/// main loop. The floor for "does the structured model beat a generic
/// function approximator".
pub fn train_mlp_baseline(
    cfg: &TrainConfig,
    hidden: usize,
    x_train: &Tensor,
    y_train: &Tensor,
    x_test: &Tensor,
    y_test: &Tensor,
) -> Result<MlpResult> {
    if x_train.shape().len() != 2 {
        return Err(Error::Config("baseline features must be [rows, features]".into()));
    }
    if cfg.batch_size == 0 || x_train.shape()[0] == 0 {
        return Err(Error::Config("empty training split".into()));
    }
    let f = x_train.shape()[1];
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut params = vec![
        Tensor::randn(&[f, hidden], 1.0 / (f as f64).sqrt(), &mut rng),
        Tensor::zeros(&[hidden]),
        Tensor::randn(&[hidden, hidden], 1.0 / (hidden as f64).sqrt(), &mut rng),
        Tensor::zeros(&[hidden]),
        Tensor::randn(&[hidden, 1], 1.0 / (hidden as f64).sqrt(), &mut rng),
        Tensor::zeros(&[1]),
    ];
    let (y_mean, y_std) = target_stats(y_train);
    let yz_train = standardized(y_train, y_mean, y_std);
    let mut opt = AdamState::new(
        AdamParams { lr: cfg.lr, weight_decay: cfg.weight_decay, ..AdamParams::default() },
        &params,
    )
    .with_decay_mask(vec![true, false, true, false, true, false]);
    let start = Instant::now();
    let n_rows = x_train.shape()[0];
    let mut metrics = Vec::with_capacity(cfg.epochs + 1);
    let echo = EpochMetrics {
        epoch: 0,
        step: 0,
        train_mse: mlp_eval(&params, x_train, y_train, y_mean, y_std)?,
        test_mse: mlp_eval(&params, x_test, y_test, y_mean, y_std)?,
        wall_s: start.elapsed().as_secs_f64(),
    };
    let mut stop = cfg.stop_at_test_mse.is_some_and(|s| echo.test_mse <= s);
    metrics.push(echo);
    let total_steps = (n_rows.div_ceil(cfg.batch_size) * cfg.epochs).max(1);
    for epoch in 1..=cfg.epochs {
        if stop {
            break;
        }
        let mut order: Vec<usize> = (0..n_rows).collect();
        order.shuffle(&mut ChaCha20Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64)));
        for chunk in order.chunks(cfg.batch_size) {
            if let Some(lo) = cfg.lr_min {
                let frac = (opt.step_count() as f64 / total_steps as f64).min(1.0);
                opt.set_lr(lo + 0.5 * (cfg.lr - lo) * (1.0 + (std::f64::consts::PI * frac).cos()));
            }
            let xb = gather_rows(x_train, chunk);
            let yb = gather_rows(&yz_train, chunk);
            let mut tape = Tape::new();
            let pv: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
            let xv = tape.leaf(xb);
            let out = mlp_forward(&mut tape, &pv, xv);
            let yv = tape.leaf(yb);
            let diff = tape.sub(out, yv);
            let sq = tape.square(diff);
            let loss = tape.mean(sq);
            if !tape.value(loss).item().is_finite() {
                return Err(Error::NonFinite("baseline loss"));
            }
            let grads = tape.backward(loss);
            let gvec: Vec<Tensor> =
                pv.iter().zip(&params).map(|(v, p)| grads.dense(*v, p.shape())).collect();
            opt.step(&mut params, &gvec);
        }
        let entry = EpochMetrics {
            epoch,
            step: opt.step_count(),
            train_mse: mlp_eval(&params, x_train, y_train, y_mean, y_std)?,
            test_mse: mlp_eval(&params, x_test, y_test, y_mean, y_std)?,
            wall_s: start.elapsed().as_secs_f64(),
        };
        stop = cfg.stop_at_test_mse.is_some_and(|s| entry.test_mse <= s);
        metrics.push(entry);
    }
    Ok(MlpResult { params, metrics, y_mean, y_std })
}

// ---------------------------------------------------------------------------
// Equivariance audit
// ---------------------------------------------------------------------------

/// Worst relative symmetry violations observed over all audit trials.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AuditReport {
    pub trials: usize,
    pub tol: f64,
    /// Final output: transform-then-apply vs apply-then-transform under
    /// sampled factored group elements.
    pub versor_max_rel: f64,
    /// Same check with the group element lifted from a random restricted
    /// orthogonal matrix.
    pub orthogonal_max_rel: f64,
    /// Scalar readout drift under transformed inputs (should be invariant).
    pub scalar_invariance_max_rel: f64,
    /// Violation after each layer; a broken layer shows up at its index.
    pub per_layer_max_rel: Vec<f64>,
    /// Final-output violation restricted to each of the four types.
    pub per_type_max_rel: [f64; 4],
    pub passed: bool,
}

/// Random multivector batch [rows, channels, 2^n] with standard normal
/// coefficients.
pub fn random_batch(sig: Signature, rows: usize, channels: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mvs: Vec<Vec<Multivector>> = (0..rows)
        .map(|_| (0..channels).map(|_| random_multivector(sig, &mut rng)).collect())
        .collect();
    batch_from_multivectors(sig, &mvs)
}

fn mask_type(t: &Tensor, map: &[usize], m: usize) -> Tensor {
    let d = *t.shape().last().expect("non-scalar tensor");
    let mut out = t.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        if map[i % d] != m {
            *v = 0.0;
        }
    }
    out
}

fn scalar_slice_rel(a: &Tensor, b: &Tensor) -> f64 {
    let d = *a.shape().last().expect("non-scalar tensor");
    let mut diff = 0.0f64;
    let mut scale = 1e-12f64;
    for i in (0..a.len()).step_by(d) {
        let (x, y) = (a.data()[i], b.data()[i]);
        diff = diff.max((x - y).abs());
        scale = scale.max(x.abs()).max(y.abs());
    }
    diff / scale
}

/// Measure equivariance of a model on a fixed input batch under freshly
/// sampled group elements, both factored and lifted from orthogonal
/// matrices. All violations are relative to the output magnitude.
pub fn equivariance_audit(
    model: &Model,
    x: &Tensor,
    n_trials: usize,
    tol: f64,
    seed: u64,
) -> Result<AuditReport> {
    let sig = model.sig();
    if sig.nondegenerate() == 0 {
        return Err(Error::Config("the audit needs at least one non-degenerate generator".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let outs_base = model.forward_collect(x);
    let n_layers = outs_base.len();
    let last = n_layers - 1;
    let qt_map = model.ctx().qt_map().as_slice().to_vec();
    let mut per_layer = vec![0.0f64; n_layers];
    let mut per_type = [0.0f64; 4];
    let mut versor_max = 0.0f64;
    let mut orth_max = 0.0f64;
    let mut scalar_max = 0.0f64;
    for trial in 0..n_trials {
        // Alternate parities and shear content so both halves of the group
        // get exercised.
        let k_vector = 1 + trial % 3;
        let k_radical = if sig.r() > 0 { trial % 2 } else { 0 };
        let t = sample_lipschitz_rng(sig, &mut rng, k_vector, k_radical)?;
        let xt = transform_batch(&t, x);
        let outs_t = model.forward_collect(&xt);
        for i in 0..n_layers {
            let lhs = transform_batch(&t, &outs_base[i]);
            per_layer[i] = per_layer[i].max(tensor_rel_diff(&lhs, &outs_t[i]));
        }
        let final_lhs = transform_batch(&t, &outs_base[last]);
        versor_max = versor_max.max(tensor_rel_diff(&final_lhs, &outs_t[last]));
        for (m, worst) in per_type.iter_mut().enumerate() {
            let a = mask_type(&final_lhs, &qt_map, m);
            let b = mask_type(&outs_t[last], &qt_map, m);
            *worst = worst.max(tensor_rel_diff(&a, &b));
        }
        scalar_max = scalar_max.max(scalar_slice_rel(&outs_base[last], &outs_t[last]));

        let phi = random_restricted_orthogonal(sig, &mut rng);
        let lifted = orthogonal_to_versor(&phi)?;
        let xo = transform_batch(&lifted, x);
        let yo = model.forward(&xo);
        let lhs = transform_batch(&lifted, &outs_base[last]);
        orth_max = orth_max.max(tensor_rel_diff(&lhs, &yo));
    }
    let passed = versor_max <= tol
        && orth_max <= tol
        && scalar_max <= tol
        && per_layer.iter().all(|&v| v <= tol);
    Ok(AuditReport {
        trials: n_trials,
        tol,
        versor_max_rel: versor_max,
        orthogonal_max_rel: orth_max,
        scalar_invariance_max_rel: scalar_max,
        per_layer_max_rel: per_layer,
        per_type_max_rel: per_type,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::groups::random_restricted_orthogonal;

    fn sig(p: u32, q: u32, r: u32) -> Signature {
        Signature::new(p, q, r).unwrap()
    }

    #[test]
    fn invariant_target_matches_hand_values() {
        let e1 = [1.0, 0.0, 0.0, 0.0, 0.0];
        let e2 = [0.0, 1.0, 0.0, 0.0, 0.0];
        // sin(1) - 1/2 + 1 and sin(1) - 1/2 + 0.
        assert!((regression_target(&e1, &e1) - 1.3414709848078965).abs() < 1e-15);
        assert!((regression_target(&e1, &e2) - 0.3414709848078965).abs() < 1e-15);
    }

    #[test]
    fn target_is_invariant_under_joint_rotations() {
        let s = sig(5, 0, 0);
        let mut rng = ChaCha20Rng::seed_from_u64(42);
        for _ in 0..10 {
            let m = random_restricted_orthogonal(s, &mut rng);
            let x1 = sample_point(5, &mut rng);
            let x2 = sample_point(5, &mut rng);
            let before = regression_target(&x1, &x2);
            let after = regression_target(&m.apply_vec(&x1), &m.apply_vec(&x2));
            assert!((before - after).abs() < 1e-12, "target moved by {:e}", before - after);
        }
    }

    #[test]
    fn regression_generation_is_deterministic_and_prefix_stable() {
        let a = gen_regression(7, 10, 5);
        let b = gen_regression(7, 10, 5);
        assert_eq!(a, b);
        let prefix = gen_regression(7, 4, 5);
        assert_eq!(&a[..4], &prefix[..]);
        let other = gen_regression(8, 10, 5);
        assert_ne!(a, other);
    }

    #[test]
    fn regression_embedding_matches_coordinates() {
        let s = sig(5, 0, 0);
        let samples = gen_regression(3, 6, 5);
        let (x, y) = regression_batch(s, &samples).unwrap();
        assert_eq!(x.shape(), &[6, 2, 32]);
        assert_eq!(y.shape(), &[6, 1]);
        for (b, smp) in samples.iter().enumerate() {
            for i in 0..5 {
                assert_eq!(x.data()[(b * 2) * 32 + (1 << i)], smp.x1[i]);
                assert_eq!(x.data()[(b * 2 + 1) * 32 + (1 << i)], smp.x2[i]);
            }
            assert_eq!(y.data()[b], smp.target);
        }
        // Transforming the embedded batch agrees with embedding the
        // matrix-transformed coordinates.
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let m = random_restricted_orthogonal(s, &mut rng);
        let t = orthogonal_to_versor(&m).unwrap();
        let mapped: Vec<RegressionSample> = samples
            .iter()
            .map(|smp| RegressionSample {
                x1: m.apply_vec(&smp.x1),
                x2: m.apply_vec(&smp.x2),
                target: smp.target,
            })
            .collect();
        let (x_mapped, _) = regression_batch(s, &mapped).unwrap();
        assert!(tensor_rel_diff(&transform_batch(&t, &x), &x_mapped) < 1e-9);

        let feats = vector_features(s, &x);
        assert_eq!(feats.shape(), &[6, 10]);
        assert_eq!(feats.data()[..5], samples[0].x1[..]);
        assert_eq!(feats.data()[5..10], samples[0].x2[..]);
    }

    #[test]
    fn regression_csv_round_trips_exactly() {
        let samples = gen_regression(11, 7, 5);
        let mut buf = Vec::new();
        write_regression_csv(&mut buf, &samples).unwrap();
        let mut buf2 = Vec::new();
        write_regression_csv(&mut buf2, &samples).unwrap();
        assert_eq!(buf, buf2, "repeated writes must be byte-identical");
        let back = read_regression_csv(&buf[..]).unwrap();
        assert_eq!(samples, back);
    }

    #[test]
    fn cube_and_tetrahedron_volumes_are_exact() {
        let cube: Vec<Vec<f64>> = (0..8)
            .map(|i| vec![(i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64])
            .collect();
        let (v, degenerate) = hull_volume_3d(&cube);
        assert!(!degenerate);
        assert!((v - 1.0).abs() < 1e-12, "cube volume {v}");

        // Interior and surface points must not change the hull.
        let mut padded = cube.clone();
        padded.push(vec![0.5, 0.5, 0.5]);
        padded.push(vec![0.5, 0.5, 0.0]);
        let (v, _) = hull_volume_3d(&padded);
        assert!((v - 1.0).abs() < 1e-12, "padded cube volume {v}");

        let tetra =
            vec![vec![0.0, 0.0, 0.0], vec![1.0, 1.0, 0.0], vec![1.0, 0.0, 1.0], vec![0.0, 1.0, 1.0]];
        let (v, degenerate) = hull_volume_3d(&tetra);
        assert!(!degenerate);
        assert!((v - 1.0 / 3.0).abs() < 1e-12, "tetrahedron volume {v}");
    }

    #[test]
    fn coplanar_points_are_flagged_degenerate() {
        let flat: Vec<Vec<f64>> =
            (0..6).map(|i| vec![(i % 3) as f64, (i / 3) as f64, 0.0]).collect();
        assert_eq!(hull_volume_3d(&flat), (0.0, true));
        let line: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, 2.0 * i as f64, 0.0]).collect();
        assert_eq!(hull_volume_3d(&line), (0.0, true));
    }

    #[test]
    fn four_point_hulls_match_the_determinant_formula() {
        for seed in 0..10u64 {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let pts: Vec<Vec<f64>> = (0..4)
                .map(|_| (0..3).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
                .collect();
            let a = sub3(&pts[1], &pts[0]);
            let b = sub3(&pts[2], &pts[0]);
            let c = sub3(&pts[3], &pts[0]);
            let want = dot3(cross3(a, b), c).abs() / 6.0;
            let (got, degenerate) = hull_volume_3d(&pts);
            assert!(!degenerate);
            assert!((got - want).abs() < 1e-12 * want.max(1.0), "seed {seed}: {got} vs {want}");
        }
    }

    #[test]
    fn membership_tester_handles_boundary_and_cached_certificates() {
        let tri = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]];
        let mut member = HullMembership::new(&tri);
        assert!(member.contains(&[0.2, 0.2]));
        assert!(member.contains(&[1.0, 0.0]), "vertices are members");
        assert!(member.contains(&[0.5, 0.5]), "edge midpoints are members");
        assert!(!member.contains(&[0.6, 0.6]));
        assert!(!member.contains(&[-0.1, 0.5]));
        // Repeat queries along one face so the cached certificate path, not
        // just the fresh solve, decides them.
        for i in 0..50 {
            let t = i as f64 / 50.0;
            assert!(!member.contains(&[0.51 + 0.4 * t, 0.51 + 0.4 * (1.0 - t)]));
        }
        assert!(member.contains(&[0.49, 0.49]), "cache must not reject interior points");
    }

    #[test]
    fn monte_carlo_volume_matches_exact_hulls() {
        let simplex =
            vec![vec![0.0, 0.0, 0.0], vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        let (v, std) = hull_volume_mc(&simplex, 50_000, 7);
        assert!(std > 0.0);
        assert!((v - 1.0 / 6.0).abs() < 3.0 * std + 1e-9, "simplex estimate {v} +- {std}");

        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let pts: Vec<Vec<f64>> = (0..8)
            .map(|_| (0..3).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let (exact, degenerate) = hull_volume_3d(&pts);
        assert!(!degenerate);
        let (mc, std) = hull_volume_mc(&pts, 40_000, 11);
        assert!((mc - exact).abs() < 4.0 * std, "mc {mc} vs exact {exact} (std {std})");
    }

    #[test]
    fn rank_deficient_point_sets_report_zero_volume() {
        // Ten points confined to a 4-dimensional slice of R^5.
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let pts: Vec<Vec<f64>> = (0..10)
            .map(|_| {
                let mut p: Vec<f64> =
                    (0..4).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                p.push(p[0] + p[1]);
                p
            })
            .collect();
        assert_eq!(hull_volume_mc(&pts, 1_000, 1), (0.0, 0.0));
    }

    #[test]
    fn hull_generation_is_deterministic() {
        let a = gen_hull(13, 4, 3, 8, 0);
        let b = gen_hull(13, 4, 3, 8, 0);
        assert_eq!(a, b);
        assert!(a.iter().all(|s| s.volume > 0.0 && s.volume_std == 0.0));
        let c = gen_hull(13, 2, 4, 6, 2_000);
        let d = gen_hull(13, 2, 4, 6, 2_000);
        assert_eq!(c, d);
        assert!(c.iter().all(|s| s.volume > 0.0 && s.volume_std > 0.0));
    }

    #[test]
    fn hull_csv_round_trips_exactly() {
        let samples = gen_hull(21, 3, 3, 5, 0);
        let mut buf = Vec::new();
        write_hull_csv(&mut buf, &samples).unwrap();
        let back = read_hull_csv(&buf[..]).unwrap();
        assert_eq!(samples, back);
    }

    fn tiny_regression_data(s: Signature, seed: u64) -> TaskData {
        let train = gen_regression(seed, 48, s.n());
        let test = gen_regression(seed ^ 0xffff, 24, s.n());
        regression_task_data(s, &train, &test).unwrap()
    }

    #[test]
    fn zero_epoch_training_echoes_initial_metrics() {
        let s = sig(3, 0, 0);
        let data = tiny_regression_data(s, 1);
        let cfg = TrainConfig { epochs: 0, channels: 4, depth: 1, scalar_gate_hidden: 0, ..TrainConfig::default() };
        let result = train(s, 2, &cfg, &data).unwrap();
        assert_eq!(result.metrics.len(), 1);
        assert_eq!(result.metrics[0].epoch, 0);
        assert_eq!(result.metrics[0].step, 0);
        assert!(result.metrics[0].train_mse.is_finite());
        assert!(result.metrics[0].test_mse.is_finite());
    }

    #[test]
    fn short_training_reduces_the_loss() {
        let s = sig(3, 0, 0);
        for seed in 1..=3u64 {
            let data = tiny_regression_data(s, seed);
            let cfg = TrainConfig {
                seed,
                epochs: 6,
                batch_size: 16,
                lr: 5e-3,
                channels: 4,
                depth: 1,
                lr_min: None,
                weight_decay: 0.0,
                scalar_gate_hidden: 0,
                stop_at_test_mse: None,
            };
            let result = train(s, 2, &cfg, &data).unwrap();
            let first = result.metrics.first().unwrap().train_mse;
            let last = result.metrics.last().unwrap().train_mse;
            assert!(
                last < first,
                "seed {seed}: train mse went from {first} to {last}"
            );
        }
    }

    #[test]
    fn training_is_deterministic() {
        let s = sig(3, 0, 0);
        let data = tiny_regression_data(s, 2);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 16,
            channels: 4,
            depth: 1,
            scalar_gate_hidden: 4,
            ..TrainConfig::default()
        };
        let a = train(s, 2, &cfg, &data).unwrap();
        let b = train(s, 2, &cfg, &data).unwrap();
        for (ma, mb) in a.metrics.iter().zip(&b.metrics) {
            assert_eq!(ma.train_mse.to_bits(), mb.train_mse.to_bits());
            assert_eq!(ma.test_mse.to_bits(), mb.test_mse.to_bits());
        }
        for (pa, pb) in a.model.params().iter().zip(b.model.params()) {
            assert_eq!(pa.data(), pb.data());
        }
    }

    #[test]
    fn resumed_training_matches_the_uninterrupted_run() {
        let s = sig(3, 0, 0);
        let data = tiny_regression_data(s, 6);
        let cfg_full = TrainConfig {
            epochs: 4,
            batch_size: 16,
            channels: 4,
            depth: 1,
            scalar_gate_hidden: 0,
            ..TrainConfig::default()
        };
        let full = train(s, 2, &cfg_full, &data).unwrap();

        let cfg_half = TrainConfig { epochs: 2, ..cfg_full.clone() };
        let half = train(s, 2, &cfg_half, &data).unwrap();
        // Reload the halfway parameters as a checkpoint restore would.
        let mut model = build_model(s, 2, &cfg_full).unwrap();
        let named: Vec<(String, Tensor)> =
            half.model.named_params().iter().map(|(n, t)| (n.clone(), (*t).clone())).collect();
        model.load_named_params(&named).unwrap();
        let resumed = train_from_state(model, &cfg_full, &data, Some(half.state)).unwrap();

        assert_eq!(resumed.metrics.first().unwrap().epoch, 2, "echo of the checkpointed epoch");
        for m in &resumed.metrics {
            let other = full.metrics.iter().find(|o| o.epoch == m.epoch).unwrap();
            assert_eq!(m.train_mse.to_bits(), other.train_mse.to_bits(), "epoch {}", m.epoch);
            assert_eq!(m.test_mse.to_bits(), other.test_mse.to_bits(), "epoch {}", m.epoch);
            assert_eq!(m.step, other.step, "epoch {}", m.epoch);
        }
        for (a, b) in resumed.model.params().iter().zip(full.model.params()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn mlp_baseline_trains_and_reports_metrics() {
        let s = sig(3, 0, 0);
        let data = tiny_regression_data(s, 4);
        let feats_train = vector_features(s, &data.x_train);
        let feats_test = vector_features(s, &data.x_test);
        let cfg = TrainConfig { epochs: 4, batch_size: 16, ..TrainConfig::default() };
        let result =
            train_mlp_baseline(&cfg, 16, &feats_train, &data.y_train, &feats_test, &data.y_test)
                .unwrap();
        assert_eq!(result.metrics.len(), 5);
        assert!(result.metrics.iter().all(|m| m.train_mse.is_finite() && m.test_mse.is_finite()));
        let first = result.metrics.first().unwrap().train_mse;
        let last = result.metrics.last().unwrap().train_mse;
        assert!(last < first, "baseline mse went from {first} to {last}");
    }

    fn audit_model(s: Signature, break_layer: Option<usize>) -> Model {
        let cfg = TrainConfig {
            seed: 5,
            channels: 3,
            depth: 2,
            scalar_gate_hidden: 4,
            ..TrainConfig::default()
        };
        let mut model = build_model(s, 2, &cfg).unwrap();
        model.break_layer = break_layer;
        model
    }

    #[test]
    fn audit_passes_on_fresh_models() {
        let s = sig(3, 0, 0);
        let model = audit_model(s, None);
        let x = random_batch(s, 4, 2, 17);
        let report = equivariance_audit(&model, &x, 4, 1e-8, 23).unwrap();
        assert!(report.passed, "violations: {report:?}");
        assert!(report.versor_max_rel <= 1e-8);
        assert!(report.orthogonal_max_rel <= 1e-8);
        assert!(report.scalar_invariance_max_rel <= 1e-8);
        assert!(report.per_type_max_rel.iter().all(|&v| v <= 1e-8));
    }

    #[test]
    fn audit_localizes_an_injected_violation() {
        let s = sig(3, 0, 0);
        let model = audit_model(s, Some(1));
        let x = random_batch(s, 4, 2, 17);
        let report = equivariance_audit(&model, &x, 4, 1e-8, 23).unwrap();
        assert!(!report.passed);
        assert!(report.per_layer_max_rel[0] <= 1e-8, "layers before the break stay clean");
        assert!(report.per_layer_max_rel[1] > 1e-2, "break layer must light up");
        assert!(report.versor_max_rel > 1e-2);
    }

    #[test]
    fn audit_is_deterministic() {
        let s = sig(1, 3, 0);
        let model = audit_model(s, None);
        let x = random_batch(s, 3, 2, 29);
        let a = equivariance_audit(&model, &x, 3, 1e-8, 31).unwrap();
        let b = equivariance_audit(&model, &x, 3, 1e-8, 31).unwrap();
        assert_eq!(a.versor_max_rel.to_bits(), b.versor_max_rel.to_bits());
        assert_eq!(a.orthogonal_max_rel.to_bits(), b.orthogonal_max_rel.to_bits());
        assert_eq!(a.per_layer_max_rel, b.per_layer_max_rel);
    }

    #[test]
    fn type_grouped_stacks_use_fewer_parameters() {
        let n = 5;
        for depth in [1usize, 2, 8] {
            let qt: usize = build_layer_stack(2, 8, depth, 0, false)
                .iter()
                .map(|l| l.param_count(n))
                .sum();
            let grade: usize = build_layer_stack(2, 8, depth, 0, true)
                .iter()
                .map(|l| l.param_count(n))
                .sum();
            assert!(qt < grade, "depth {depth}: {qt} vs {grade}");
        }
    }
}
