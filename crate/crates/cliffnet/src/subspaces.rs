//! Grade, parity, and quaternion-type projections plus the conjugation
//! involutions.
//!
//! The quaternion-type subspaces collect grades by residue mod 4; they are
//! exactly the joint sign eigenspaces of grade involution and reversion:
//!
//! | type k mod 4      | 0 | 1 | 2 | 3 |
//! |-------------------|---|---|---|---|
//! | grade involution  | + | - | + | - |
//! | reversion         | + | + | - | - |
//! | Clifford conj.    | + | - | - | + |
//!
//! All operations here are componentwise sign/mask applications of length
//! 2^n, precomputed per signature.

use crate::algebra::{Multivector, Signature};
use crate::error::Error;
use crate::Result;

/// A set of grades, an (n+1)-bit selector.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct GradeMask {
    bits: u32,
}

impl GradeMask {
    pub fn empty() -> GradeMask {
        GradeMask { bits: 0 }
    }

    pub fn from_grades(sig: Signature, grades: &[usize]) -> Result<GradeMask> {
        let mut bits = 0u32;
        for &k in grades {
            if k > sig.n() {
                return Err(Error::GradeOutOfRange { k, n: sig.n() });
            }
            bits |= 1 << k;
        }
        Ok(GradeMask { bits })
    }

    pub fn contains(self, k: usize) -> bool {
        self.bits & (1 << k) != 0
    }
}

/// Per-grade signs, exactly +-1, defining a conjugation operation
/// x -> sum_k lambda_k <x>_k.
#[derive(Clone, PartialEq, Debug)]
pub struct SignVector {
    lambda: Vec<f64>,
}

impl SignVector {
    pub fn new(sig: Signature, lambda: Vec<f64>) -> Result<SignVector> {
        if lambda.len() != sig.n() + 1 {
            return Err(Error::Parse(format!(
                "sign vector needs {} entries for {sig}, got {}",
                sig.n() + 1,
                lambda.len()
            )));
        }
        if lambda.iter().any(|&s| s != 1.0 && s != -1.0) {
            return Err(Error::Parse("sign vector entries must be exactly +-1".into()));
        }
        Ok(SignVector { lambda })
    }

    pub fn signs(&self) -> &[f64] {
        &self.lambda
    }
}

/// Keep only the grade-k part. Idempotent, linear.
pub fn grade_project(x: &Multivector, k: usize) -> Result<Multivector> {
    let alg = x.alg().clone();
    if k > alg.n() {
        return Err(Error::GradeOutOfRange { k, n: alg.n() });
    }
    let mut out = Multivector::zero(x.sig());
    for m in 0..alg.dim() {
        if alg.grade_of(m) == k {
            out.set_coeff(m, x.coeff(m));
        }
    }
    Ok(out)
}

/// Keep grades in the mask.
pub fn grade_mask_project(x: &Multivector, mask: GradeMask) -> Multivector {
    let alg = x.alg().clone();
    let mut out = Multivector::zero(x.sig());
    for m in 0..alg.dim() {
        if mask.contains(alg.grade_of(m)) {
            out.set_coeff(m, x.coeff(m));
        }
    }
    out
}

/// Keep grades with grade mod 2 == l (the even/odd split).
pub fn parity_project(x: &Multivector, l: usize) -> Multivector {
    assert!(l < 2, "parity is 0 or 1");
    let alg = x.alg().clone();
    let mut out = Multivector::zero(x.sig());
    for m in 0..alg.dim() {
        if alg.grade_of(m) % 2 == l {
            out.set_coeff(m, x.coeff(m));
        }
    }
    out
}

/// Keep grades with grade mod 4 == m (quaternion type). The four projections
/// partition the algebra.
pub fn qt_project(x: &Multivector, m: usize) -> Multivector {
    assert!(m < 4, "quaternion type is 0..=3");
    let alg = x.alg().clone();
    let mut out = Multivector::zero(x.sig());
    for blade in 0..alg.dim() {
        if alg.qt_of(blade) == m {
            out.set_coeff(blade, x.coeff(blade));
        }
    }
    out
}

/// General conjugation operation sum_k lambda_k <x>_k.
pub fn conjugation_op(x: &Multivector, lambda: &SignVector) -> Multivector {
    let alg = x.alg().clone();
    assert_eq!(lambda.lambda.len(), alg.n() + 1, "sign vector length mismatch");
    let mut out = Multivector::zero(x.sig());
    for m in 0..alg.dim() {
        out.set_coeff(m, lambda.lambda[alg.grade_of(m)] * x.coeff(m));
    }
    out
}

impl Multivector {
    fn apply_signs(&self, signs: &[f64]) -> Multivector {
        let mut out = Multivector::zero(self.sig());
        for (m, &s) in signs.iter().enumerate() {
            out.set_coeff(m, s * self.coeff(m));
        }
        out
    }

    /// Grade involution: grade-k part times (-1)^k. Multiplicative.
    pub fn grade_involution(&self) -> Multivector {
        let alg = self.alg().clone();
        self.apply_signs(alg.hat_signs())
    }

    /// Reversion: grade-k part times (-1)^{k(k-1)/2}. Anti-multiplicative.
    pub fn reversion(&self) -> Multivector {
        let alg = self.alg().clone();
        self.apply_signs(alg.rev_signs())
    }

    /// Clifford conjugation, the composition of the other two involutions.
    pub fn clifford_conjugation(&self) -> Multivector {
        let alg = self.alg().clone();
        self.apply_signs(alg.conj_signs())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::Signature;

    fn cl13() -> Signature {
        Signature::new(1, 3, 0).unwrap()
    }

    fn w() -> Multivector {
        Multivector::parse(cl13(), "1*e + 2*e_1 + 3*e_2 + 4*e_234 + 5*e_1234").unwrap()
    }

    #[test]
    fn worked_minkowski_projections() {
        let w = w();
        let g1 = grade_project(&w, 1).unwrap();
        assert_eq!(g1.to_text(), "2*e_1 + 3*e_2");
        let odd = parity_project(&w, 1);
        assert_eq!(odd.to_text(), "2*e_1 + 3*e_2 + 4*e_234");
        let t0 = qt_project(&w, 0);
        assert_eq!(t0.to_text(), "1*e + 5*e_1234");
    }

    #[test]
    fn projections_partition_and_idempotent() {
        let w = w();
        let mut sum = Multivector::zero(cl13());
        for k in 0..=4 {
            let part = grade_project(&w, k).unwrap();
            assert_eq!(grade_project(&part, k).unwrap(), part);
            sum = &sum + &part;
        }
        assert_eq!(sum, w);

        let mut qsum = Multivector::zero(cl13());
        for m in 0..4 {
            qsum = &qsum + &qt_project(&w, m);
        }
        assert_eq!(qsum, w);
        assert_eq!(&parity_project(&w, 0) + &parity_project(&w, 1), w);
    }

    #[test]
    fn grade_project_range_check() {
        assert!(grade_project(&w(), 5).is_err());
    }

    #[test]
    fn qt_equals_grade_for_small_n() {
        let s = Signature::new(3, 0, 0).unwrap();
        let x = Multivector::parse(s, "1*e + 2*e_1 + 3*e_12 + 4*e_123").unwrap();
        for m in 0..=3 {
            assert_eq!(qt_project(&x, m), grade_project(&x, m).unwrap());
        }
    }

    #[test]
    fn grade_five_has_type_one() {
        let s = Signature::new(5, 0, 0).unwrap();
        let x = Multivector::basis_blade(s, 0b11111).unwrap();
        assert_eq!(qt_project(&x, 1), x);
        assert_eq!(qt_project(&x, 0), Multivector::zero(s));
    }

    #[test]
    fn involution_signs_per_type() {
        // hat: + - + -, rev: + + - -, conj: + - - +
        let s = Signature::new(5, 0, 0).unwrap();
        let x = Multivector::parse(s, "1*e + 1*e_1 + 1*e_12 + 1*e_123 + 1*e_1234 + 1*e_12345").unwrap();
        let hat = x.grade_involution();
        let rev = x.reversion();
        let conj = x.clifford_conjugation();
        for m in 0..4usize {
            let part = qt_project(&x, m);
            let hs = [1.0, -1.0, 1.0, -1.0][m];
            let rs = [1.0, 1.0, -1.0, -1.0][m];
            assert_eq!(qt_project(&hat, m), part.scale(hs), "hat on type {m}");
            assert_eq!(qt_project(&rev, m), part.scale(rs), "rev on type {m}");
            assert_eq!(qt_project(&conj, m), part.scale(hs * rs), "conj on type {m}");
        }
    }

    #[test]
    fn involution_composition_and_reversal() {
        let s = Signature::new(1, 2, 1).unwrap();
        let x = Multivector::parse(s, "0.5*e + 1*e_1 + -2*e_24 + 3*e_123 + 1*e_1234").unwrap();
        let y = Multivector::parse(s, "-1*e_2 + 2*e_14 + 1*e_134").unwrap();
        assert_eq!(x.grade_involution().grade_involution(), x);
        assert_eq!(x.reversion().reversion(), x);
        assert_eq!(x.reversion().grade_involution(), x.clifford_conjugation());
        // hat(xy) = hat(x) hat(y); rev(xy) = rev(y) rev(x)
        let xy = &x * &y;
        assert!(xy.grade_involution().max_abs_diff(&(&x.grade_involution() * &y.grade_involution())) < 1e-12);
        assert!(xy.reversion().max_abs_diff(&(&y.reversion() * &x.reversion())) < 1e-12);
    }

    #[test]
    fn conjugation_op_special_cases() {
        let s = Signature::new(1, 3, 0).unwrap();
        let x = w();
        let n = s.n();
        let all_plus = SignVector::new(s, vec![1.0; n + 1]).unwrap();
        assert_eq!(conjugation_op(&x, &all_plus), x);
        let hat: Vec<f64> = (0..=n).map(|k| if k % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let hat = SignVector::new(s, hat).unwrap();
        assert_eq!(conjugation_op(&x, &hat), x.grade_involution());
        let rev: Vec<f64> = (0..=n).map(|k| if (k * (k.max(1) - 1) / 2) % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let rev = SignVector::new(s, rev).unwrap();
        assert_eq!(conjugation_op(&x, &rev), x.reversion());
    }

    #[test]
    fn sign_vector_validation() {
        let s = Signature::new(2, 0, 0).unwrap();
        assert!(SignVector::new(s, vec![1.0, -1.0]).is_err());
        assert!(SignVector::new(s, vec![1.0, 0.5, 1.0]).is_err());
        assert!(SignVector::new(s, vec![1.0, -1.0, 1.0]).is_ok());
    }

    #[test]
    fn grade_mask_projection() {
        let s = Signature::new(2, 0, 1).unwrap();
        let x = Multivector::parse(s, "1*e + 2*e_1 + 3*e_13 + 4*e_123").unwrap();
        let mask = GradeMask::from_grades(s, &[0, 2]).unwrap();
        assert_eq!(grade_mask_project(&x, mask).to_text(), "1*e + 3*e_13");
        assert!(GradeMask::from_grades(s, &[4]).is_err());
    }
}
