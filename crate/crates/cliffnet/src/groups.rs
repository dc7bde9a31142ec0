//! Versors, adjoint representations, norm functions, Lipschitz-group
//! membership predicates, and the versor <-> orthogonal-matrix
//! correspondence.
//!
//! A versor is kept in factored form so its inverse is exact: vector factors
//! v (with q(v) != 0) invert to v/q(v), and radical shears e + m e_a e_b
//! (e_b in the radical) invert to e - m e_a e_b. Products of such factors
//! land in the Lipschitz group, whose twisted adjoint action on grade 1
//! realizes exactly the orthogonal transformations that fix the radical
//! pointwise; `orthogonal_to_versor` walks that correspondence backwards via
//! reflection decomposition plus one shear per radical-coupling entry.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::algebra::{Multivector, Signature};
use crate::error::Error;
use crate::subspaces::parity_project;
use crate::Result;

/// Relative tolerance for membership predicates, against the largest
/// transformed coefficient.
pub const MEMBERSHIP_TOL: f64 = 1e-9;

/// One versor factor with an exactly known inverse.
#[derive(Clone, Debug)]
pub enum Factor {
    /// Invertible vector in the non-degenerate span: q(v) != 0.
    Vector(Multivector),
    /// e + m e_a e_b with e_a non-degenerate and e_b radical.
    RadicalShear { a: usize, b: usize, m: f64 },
}

impl Factor {
    fn multivector(&self, sig: Signature) -> Multivector {
        match self {
            Factor::Vector(v) => v.clone(),
            Factor::RadicalShear { a, b, m } => {
                let mut x = Multivector::one(sig);
                // a < b always, so e_a e_b carries coefficient +m
                x.set_coeff((1 << (a - 1)) | (1 << (b - 1)), *m);
                x
            }
        }
    }

    fn inverse(&self, sig: Signature) -> Multivector {
        match self {
            Factor::Vector(v) => v.scale(1.0 / quadratic_form(v)),
            Factor::RadicalShear { a, b, m } => {
                let mut x = Multivector::one(sig);
                x.set_coeff((1 << (a - 1)) | (1 << (b - 1)), -*m);
                x
            }
        }
    }

    fn validate(&self, sig: Signature) -> Result<()> {
        match self {
            Factor::Vector(v) => {
                if v.sig() != sig {
                    return Err(Error::SignatureMismatch(v.sig(), sig));
                }
                let alg = v.alg().clone();
                for mask in 0..alg.dim() {
                    let c = v.coeff(mask);
                    if c != 0.0 && alg.grade_of(mask) != 1 {
                        return Err(Error::InvalidFactor(format!(
                            "vector factor has a grade-{} component",
                            alg.grade_of(mask)
                        )));
                    }
                }
                for a in sig.nondegenerate() + 1..=sig.n() {
                    if v.coeff(1 << (a - 1)) != 0.0 {
                        return Err(Error::InvalidFactor(
                            "vector factor touches the radical span".into(),
                        ));
                    }
                }
                let q = quadratic_form(v);
                if q.abs() < 1e-12 {
                    return Err(Error::InvalidFactor(format!("vector factor is null: q(v) = {q:.3e}")));
                }
                Ok(())
            }
            Factor::RadicalShear { a, b, m } => {
                if *a < 1 || *a > sig.nondegenerate() {
                    return Err(Error::InvalidFactor(format!(
                        "shear index a = {a} is not a non-degenerate generator of {sig}"
                    )));
                }
                if *b <= sig.nondegenerate() || *b > sig.n() {
                    return Err(Error::InvalidFactor(format!(
                        "shear index b = {b} is not a radical generator of {sig}"
                    )));
                }
                if !m.is_finite() {
                    return Err(Error::InvalidFactor("shear coefficient is not finite".into()));
                }
                Ok(())
            }
        }
    }
}

/// Quadratic form of the grade-1 part: q(v) = sum_a eta_aa v_a^2.
pub fn quadratic_form(v: &Multivector) -> f64 {
    let sig = v.sig();
    (1..=sig.n()).map(|a| sig.eta(a) as f64 * v.coeff(1 << (a - 1)).powi(2)).sum()
}

/// Symmetric bilinear form on grade-1 coordinates. Accepts slices covering
/// just the leading generators (radical coordinates contribute zero anyway).
fn bilinear(sig: Signature, x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    (0..x.len()).map(|i| sig.eta(i + 1) as f64 * x[i] * y[i]).sum()
}

/// Group element in factored form. The cached product and inverse satisfy
/// `product * inverse = e` to relative 1e-10 (checked at construction).
#[derive(Clone, Debug)]
pub struct Versor {
    sig: Signature,
    factors: Vec<Factor>,
    product: Multivector,
    inverse: Multivector,
}

impl Versor {
    pub fn identity(sig: Signature) -> Versor {
        Versor {
            sig,
            factors: Vec::new(),
            product: Multivector::one(sig),
            inverse: Multivector::one(sig),
        }
    }

    pub fn from_factors(sig: Signature, factors: Vec<Factor>) -> Result<Versor> {
        let mut product = Multivector::one(sig);
        let mut inverse = Multivector::one(sig);
        for f in &factors {
            f.validate(sig)?;
            product = &product * &f.multivector(sig);
            inverse = &f.inverse(sig) * &inverse;
        }
        let check = &product * &inverse;
        let residual = check.max_abs_diff(&Multivector::one(sig));
        let scale = product.norm_inf().max(1.0);
        if residual > 1e-10 * scale {
            return Err(Error::InverseCheck { residual });
        }
        Ok(Versor { sig, factors, product, inverse })
    }

    pub fn sig(&self) -> Signature {
        self.sig
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn product(&self) -> &Multivector {
        &self.product
    }

    pub fn inverse(&self) -> &Multivector {
        &self.inverse
    }

    /// Adjoint action T x T^-1.
    pub fn adjoint(&self, x: &Multivector) -> Multivector {
        assert_eq!(self.sig, x.sig(), "adjoint across signatures");
        &(&self.product * x) * &self.inverse
    }

    /// Twisted adjoint, first form: hat(T) x T^-1.
    pub fn twisted_adjoint_check(&self, x: &Multivector) -> Multivector {
        assert_eq!(self.sig, x.sig(), "twisted adjoint across signatures");
        &(&self.product.grade_involution() * x) * &self.inverse
    }

    /// Twisted adjoint, second form:
    /// T <x>_(0) T^-1 + hat(T) <x>_(1) T^-1.
    ///
    /// Additive in x and fixes scalars; multiplicative whenever the versor is
    /// parity-homogeneous (always true for factored versors).
    pub fn twisted_adjoint(&self, x: &Multivector) -> Multivector {
        assert_eq!(self.sig, x.sig(), "twisted adjoint across signatures");
        let even = parity_project(x, 0);
        let odd = parity_project(x, 1);
        let even_img = &(&self.product * &even) * &self.inverse;
        let odd_img = &(&self.product.grade_involution() * &odd) * &self.inverse;
        &even_img + &odd_img
    }
}

/// Norm function psi(U) = rev(U) U.
pub fn psi(u: &Multivector) -> Multivector {
    &u.reversion() * u
}

/// Norm function chi(U) = conj(U) U.
pub fn chi(u: &Multivector) -> Multivector {
    &u.clifford_conjugation() * u
}

/// Random vector in the non-degenerate span with |q(v)| = 1 (resampled while
/// |q| < 0.1 to stay away from the null cone).
fn sample_unit_vector<R: Rng>(sig: Signature, rng: &mut R) -> Multivector {
    let pq = sig.nondegenerate();
    loop {
        let mut coords = vec![0.0; sig.n()];
        for c in coords.iter_mut().take(pq) {
            *c = rng.sample::<f64, _>(StandardNormal);
        }
        let v = Multivector::vector(sig, &coords).expect("coords match signature");
        let q = quadratic_form(&v);
        if q.abs() >= 0.1 {
            return v.scale(1.0 / q.abs().sqrt());
        }
    }
}

/// Sample a Lipschitz-group element: a product of `k_vector` reflections
/// (random non-null vectors, normalized to |q(v)| = 1) and `k_radical` shears
/// e + m e_a e_b with m uniform in [-1,1].
pub fn sample_lipschitz(
    sig: Signature,
    seed: u64,
    k_vector: usize,
    k_radical: usize,
) -> Result<Versor> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    sample_lipschitz_rng(sig, &mut rng, k_vector, k_radical)
}

/// As [`sample_lipschitz`] with a caller-supplied generator.
pub fn sample_lipschitz_rng<R: Rng>(
    sig: Signature,
    rng: &mut R,
    k_vector: usize,
    k_radical: usize,
) -> Result<Versor> {
    let pq = sig.nondegenerate();
    if k_vector > 0 && pq == 0 {
        return Err(Error::InvalidFactor("vector factors need p+q >= 1".into()));
    }
    if k_radical > 0 && (sig.r() == 0 || pq == 0) {
        return Err(Error::InvalidFactor("radical shears need r >= 1 and p+q >= 1".into()));
    }
    let mut factors = Vec::with_capacity(k_vector + k_radical);
    for _ in 0..k_vector {
        factors.push(Factor::Vector(sample_unit_vector(sig, rng)));
    }
    for _ in 0..k_radical {
        let a = rng.gen_range(1..=pq);
        let b = rng.gen_range(pq + 1..=sig.n());
        let m = rng.gen_range(-1.0..1.0);
        factors.push(Factor::RadicalShear { a, b, m });
    }
    Versor::from_factors(sig, factors)
}

/// Random dense multivector with standard normal coefficients.
pub fn random_multivector<R: Rng>(sig: Signature, rng: &mut R) -> Multivector {
    let coeffs = (0..sig.dim()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Multivector::from_coeffs(sig, coeffs).expect("length matches")
}

/// True iff the twisted adjoint of T maps every basis blade of quaternion
/// type `m` back into type `m`, up to `tol` relative to the transformed
/// coefficients.
pub fn preserves_qt_subspace(t: &Versor, m: usize, tol: f64) -> bool {
    assert!(m < 4, "quaternion type is 0..=3");
    let alg = crate::algebra::algebra(t.sig());
    let mut max_off = 0.0f64;
    let mut scale = 1e-12f64;
    for blade in 0..alg.dim() {
        if alg.qt_of(blade) != m {
            continue;
        }
        let x = Multivector::basis_blade(t.sig(), blade).expect("valid blade");
        let y = t.twisted_adjoint(&x);
        scale = scale.max(y.norm_inf());
        for out in 0..alg.dim() {
            if alg.qt_of(out) != m {
                max_off = max_off.max(y.coeff(out).abs());
            }
        }
    }
    max_off <= tol * scale
}

/// True iff hat(X) e_a = e_a X for every generator, up to `tol` relative to
/// the largest transformed coefficient. Elements passing this check are
/// exactly the Grassmann subalgebra of the radical generators.
pub fn in_twisted_centralizer_grade1(x: &Multivector, tol: f64) -> bool {
    let sig = x.sig();
    let hat = x.grade_involution();
    let mut max_viol = 0.0f64;
    let mut scale = 1e-12f64;
    for a in 1..=sig.n() {
        let ea = Multivector::basis_vector(sig, a).expect("generator in range");
        let lhs = &hat * &ea;
        let rhs = &ea * x;
        scale = scale.max(lhs.norm_inf()).max(rhs.norm_inf());
        max_viol = max_viol.max(lhs.max_abs_diff(&rhs));
    }
    max_viol <= tol * scale
}

/// True when x lies in the Grassmann subalgebra generated by the radical
/// generators (scalars included): every blade touching a non-degenerate
/// generator carries a coefficient below tol relative to the norm.
pub fn in_radical_subalgebra(x: &Multivector, tol: f64) -> bool {
    let sig = x.sig();
    let nondeg_mask = (1usize << sig.nondegenerate()) - 1;
    let scale = x.norm_inf().max(1e-12);
    x.coeffs()
        .iter()
        .enumerate()
        .all(|(mask, c)| mask & nondeg_mask == 0 || c.abs() <= tol * scale)
}

/// n x n real matrix preserving the metric, with the restricted block form
/// ((A, 0), (M, I_r)): identity on the radical subspace, zero coupling from
/// radical into the non-degenerate span.
#[derive(Clone, Debug, PartialEq)]
pub struct OrthogonalMatrix {
    sig: Signature,
    entries: Vec<f64>,
}

/// Absolute tolerance for the metric and block-form checks.
pub const ORTHOGONALITY_TOL: f64 = 1e-9;

impl OrthogonalMatrix {
    /// Validates M^T eta M = eta (abs 1e-9) and the restricted block form.
    pub fn new(sig: Signature, entries: Vec<f64>) -> Result<OrthogonalMatrix> {
        let n = sig.n();
        if entries.len() != n * n {
            return Err(Error::NotOrthogonal(format!(
                "expected {} entries for {sig}, got {}",
                n * n,
                entries.len()
            )));
        }
        if entries.iter().any(|e| !e.is_finite()) {
            return Err(Error::NotOrthogonal("non-finite entry".into()));
        }
        let m = OrthogonalMatrix { sig, entries };
        m.validate()?;
        Ok(m)
    }

    pub fn identity(sig: Signature) -> OrthogonalMatrix {
        let n = sig.n();
        let mut entries = vec![0.0; n * n];
        for i in 0..n {
            entries[i * n + i] = 1.0;
        }
        OrthogonalMatrix { sig, entries }
    }

    fn validate(&self) -> Result<()> {
        let n = self.sig.n();
        let pq = self.sig.nondegenerate();
        // metric preservation: (M^T eta M)_{ij} = eta_{ij}; report the worst
        // entry, not the first
        let mut worst = 0.0f64;
        let mut at = (0usize, 0usize);
        for i in 0..n {
            for j in 0..n {
                let mut g = 0.0;
                for k in 0..n {
                    g += self.entry(k, i) * self.sig.eta(k + 1) as f64 * self.entry(k, j);
                }
                let want = if i == j { self.sig.eta(i + 1) as f64 } else { 0.0 };
                if (g - want).abs() > worst {
                    worst = (g - want).abs();
                    at = (i, j);
                }
            }
        }
        if worst > ORTHOGONALITY_TOL {
            return Err(Error::NotOrthogonal(format!(
                "max metric violation {worst:.3e} at ({}, {})",
                at.0, at.1
            )));
        }
        // restricted block form: zero top-right block, identity radical block
        for i in 0..n {
            for j in pq..n {
                let want = if i == j { 1.0 } else { 0.0 };
                let have = self.entry(i, j);
                if i < pq && have.abs() > ORTHOGONALITY_TOL {
                    return Err(Error::NotOrthogonal(format!(
                        "radical column {} couples into the non-degenerate span",
                        j + 1
                    )));
                }
                if i >= pq && (have - want).abs() > ORTHOGONALITY_TOL {
                    return Err(Error::NotOrthogonal(format!(
                        "radical block is not the identity at ({i},{j})"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn sig(&self) -> Signature {
        self.sig
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    #[inline]
    pub fn entry(&self, row: usize, col: usize) -> f64 {
        self.entries[row * self.sig.n() + col]
    }

    pub fn apply_vec(&self, v: &[f64]) -> Vec<f64> {
        let n = self.sig.n();
        assert_eq!(v.len(), n, "vector length mismatch");
        (0..n).map(|i| (0..n).map(|j| self.entry(i, j) * v[j]).sum()).collect()
    }

    pub fn max_abs_diff(&self, other: &OrthogonalMatrix) -> f64 {
        assert_eq!(self.sig, other.sig, "matrix comparison across signatures");
        self.entries
            .iter()
            .zip(&other.entries)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// Matrix of the twisted adjoint restricted to grade 1: column a holds the
/// grade-1 coordinates of the image of e_a. Fails if any image leaks out of
/// grade 1 (the element would not be in the Lipschitz group).
pub fn versor_to_orthogonal(t: &Versor) -> Result<OrthogonalMatrix> {
    let sig = t.sig();
    let n = sig.n();
    let alg = crate::algebra::algebra(sig);
    let mut entries = vec![0.0; n * n];
    for a in 1..=n {
        let ea = Multivector::basis_vector(sig, a).expect("generator in range");
        let img = t.twisted_adjoint(&ea);
        let mut leak = 0.0f64;
        for mask in 0..alg.dim() {
            if alg.grade_of(mask) != 1 {
                leak = leak.max(img.coeff(mask).abs());
            }
        }
        if leak > MEMBERSHIP_TOL * img.norm_inf().max(1e-12) {
            return Err(Error::NotLipschitz { generator: a, leak });
        }
        for (i, c) in img.vector_part().into_iter().enumerate() {
            entries[i * n + (a - 1)] = c;
        }
    }
    OrthogonalMatrix::new(sig, entries)
}

/// Euclidean squared norm (used only for pivot thresholds).
fn eunorm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Reflection across the hyperplane orthogonal to w, applied in place to
/// every column of a pq x pq matrix: col -> col - 2 b(col,w)/q(w) w.
fn reflect_columns(sig: Signature, r: &mut [f64], pq: usize, w: &[f64]) {
    let qw = bilinear(sig, w, w);
    for col in 0..pq {
        let mut column: Vec<f64> = (0..pq).map(|row| r[row * pq + col]).collect();
        let b = bilinear(sig, &column, w);
        let f = 2.0 * b / qw;
        for (row, c) in column.iter_mut().enumerate() {
            *c -= f * w[row];
            r[row * pq + col] = *c;
        }
    }
}

/// One attempt at reducing the non-degenerate block to the identity with a
/// fixed column order. Returns the reflection vectors in application order.
fn decompose_block(sig: Signature, a_block: &[f64], order: &[usize]) -> Option<Vec<Vec<f64>>> {
    let pq = sig.nondegenerate();
    let mut r = a_block.to_vec();
    let mut reflections: Vec<Vec<f64>> = Vec::new();
    for &j in order {
        let x: Vec<f64> = (0..pq).map(|row| r[row * pq + j]).collect();
        let mut y = vec![0.0; pq];
        y[j] = 1.0;
        let close = x.iter().zip(&y).all(|(a, b)| (a - b).abs() < 1e-12);
        if close {
            continue;
        }
        let threshold = 1e-6 * (eunorm2(&x) + eunorm2(&y));
        let w1: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
        if bilinear(sig, &w1, &w1).abs() > threshold {
            reflect_columns(sig, &mut r, pq, &w1);
            reflections.push(w1);
            continue;
        }
        // x - y is (near) null: send x to -y first, then fix the sign with a
        // reflection across the target axis itself.
        let w2: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + b).collect();
        if bilinear(sig, &w2, &w2).abs() > threshold {
            reflect_columns(sig, &mut r, pq, &w2);
            reflect_columns(sig, &mut r, pq, &y);
            reflections.push(w2);
            reflections.push(y);
            continue;
        }
        return None;
    }
    let mut residual = 0.0f64;
    for row in 0..pq {
        for col in 0..pq {
            let want = if row == col { 1.0 } else { 0.0 };
            residual = residual.max((r[row * pq + col] - want).abs());
        }
    }
    if residual > 1e-9 {
        return None;
    }
    Some(reflections)
}

/// Lift a restricted-orthogonal matrix to a versor:
/// reflections for the non-degenerate block (at most p+q generically), then
/// one radical shear e + c e_j e_{p+q+i}, c = -m_ij / (2 eta_jj), per nonzero
/// radical-coupling entry m_ij.
pub fn orthogonal_to_versor(phi: &OrthogonalMatrix) -> Result<Versor> {
    phi.validate()?;
    let sig = phi.sig();
    let pq = sig.nondegenerate();
    let a_block: Vec<f64> = (0..pq)
        .flat_map(|row| (0..pq).map(move |col| phi.entry(row, col)))
        .collect();

    // Column orders: natural, then rotations; enough to escape degenerate
    // pivot sequences in mixed signatures.
    let mut orders: Vec<Vec<usize>> = Vec::new();
    let natural: Vec<usize> = (0..pq).collect();
    for shift in 0..pq.max(1) {
        let mut o = natural.clone();
        o.rotate_left(shift % pq.max(1));
        orders.push(o);
    }
    let mut reversed = natural.clone();
    reversed.reverse();
    orders.push(reversed);

    let mut tried = 0;
    for order in &orders {
        tried += 1;
        let Some(reflections) = decompose_block(sig, &a_block, order) else {
            continue;
        };
        let mut factors: Vec<Factor> = Vec::new();
        for w in reflections {
            let mut coords = vec![0.0; sig.n()];
            coords[..pq].copy_from_slice(&w);
            let v = Multivector::vector(sig, &coords).expect("coords match");
            let q = quadratic_form(&v);
            factors.push(Factor::Vector(v.scale(1.0 / q.abs().sqrt())));
        }
        for i in 1..=sig.r() {
            for j in 1..=pq {
                let m_ij = phi.entry(pq + i - 1, j - 1);
                if m_ij.abs() > 1e-14 {
                    let c = -m_ij / (2.0 * sig.eta(j) as f64);
                    factors.push(Factor::RadicalShear { a: j, b: pq + i, m: c });
                }
            }
        }
        let t = Versor::from_factors(sig, factors)?;
        let back = versor_to_orthogonal(&t)?;
        let residual = back.max_abs_diff(phi);
        if residual <= 1e-8 {
            return Ok(t);
        }
    }
    Err(Error::DecompositionStalled { residual: f64::NAN, orders: tried })
}

/// Action of a restricted-orthogonal matrix on a full multivector, defined
/// as the twisted adjoint of its versor lift.
pub fn apply_orthogonal(phi: &OrthogonalMatrix, x: &Multivector) -> Result<Multivector> {
    let t = orthogonal_to_versor(phi)?;
    Ok(t.twisted_adjoint(x))
}

/// Random member of the restricted orthogonal group: up to p+q reflections
/// composed on the non-degenerate block, radical-coupling entries uniform in
/// [-1, 1].
pub fn random_restricted_orthogonal<R: Rng>(sig: Signature, rng: &mut R) -> OrthogonalMatrix {
    let n = sig.n();
    let pq = sig.nondegenerate();
    let mut entries = vec![0.0; n * n];
    for i in 0..n {
        entries[i * n + i] = 1.0;
    }
    if pq > 0 {
        let k = rng.gen_range(0..=pq);
        for _ in 0..k {
            let w = sample_unit_vector(sig, rng).vector_part();
            let w = &w[..pq];
            // left-compose the reflection into the A block
            let qw: f64 = (0..pq).map(|i| sig.eta(i + 1) as f64 * w[i] * w[i]).sum();
            for col in 0..pq {
                let column: Vec<f64> = (0..pq).map(|row| entries[row * n + col]).collect();
                let b: f64 = (0..pq).map(|i| sig.eta(i + 1) as f64 * column[i] * w[i]).sum();
                let f = 2.0 * b / qw;
                for row in 0..pq {
                    entries[row * n + col] = column[row] - f * w[row];
                }
            }
        }
        for i in pq..n {
            for j in 0..pq {
                entries[i * n + j] = rng.gen_range(-1.0..1.0);
            }
        }
    }
    OrthogonalMatrix::new(sig, entries).expect("constructed orthogonal")
}
