//! Dense Clifford algebra arithmetic over Cl(p,q,r).
//!
//! A multivector is a flat array of 2^n real coefficients, one per basis
//! blade. Blades are encoded as bitmasks: bit `a-1` is set iff generator
//! `e_a` is present. The product of two blades lands on the XOR of their
//! masks; only the sign needs care, and that is computed exactly in integer
//! arithmetic (and cached in a full 2^n x 2^n table for n <= 8).

use std::collections::HashMap;
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};
use std::sync::{Arc, Mutex, OnceLock};

use crate::error::Error;
use crate::Result;

/// Basis blade as an n-bit mask. Mask 0 is the identity element `e`.
pub type Blade = usize;

/// Number of generators present in a blade.
#[inline]
pub fn grade(mask: Blade) -> usize {
    mask.count_ones() as usize
}

/// Algebra signature (p,q,r): p generators square to +1, q to -1, r to 0.
///
/// Generator ordering is fixed: indices 1..=p square to +1, p+1..=p+q to -1,
/// p+q+1..=n to 0 (the radical part).
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct Signature {
    p: u8,
    q: u8,
    r: u8,
}

impl Signature {
    /// Dense storage cap: 2^12 = 4096 coefficients.
    pub const MAX_N: u32 = 12;

    pub fn new(p: u32, q: u32, r: u32) -> Result<Self> {
        let n = p + q + r;
        if n < 1 {
            return Err(Error::InvalidSignature { p, q, r, reason: "need at least one generator" });
        }
        if n > Self::MAX_N {
            return Err(Error::InvalidSignature { p, q, r, reason: "more than 12 generators" });
        }
        Ok(Signature { p: p as u8, q: q as u8, r: r as u8 })
    }

    pub fn p(self) -> usize {
        self.p as usize
    }

    pub fn q(self) -> usize {
        self.q as usize
    }

    pub fn r(self) -> usize {
        self.r as usize
    }

    /// Total generator count p+q+r.
    pub fn n(self) -> usize {
        (self.p + self.q + self.r) as usize
    }

    /// Size of the non-degenerate part, p+q.
    pub fn nondegenerate(self) -> usize {
        (self.p + self.q) as usize
    }

    /// Coefficient count 2^n.
    pub fn dim(self) -> usize {
        1usize << self.n()
    }

    /// Metric square of generator `a` (1-based): +1, -1, or 0.
    pub fn eta(self, a: usize) -> i8 {
        debug_assert!(a >= 1 && a <= self.n());
        if a <= self.p as usize {
            1
        } else if a <= (self.p + self.q) as usize {
            -1
        } else {
            0
        }
    }

    /// True iff generator `a` squares to zero.
    pub fn is_radical(self, a: usize) -> bool {
        self.eta(a) == 0
    }
}

impl fmt::Display for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Cl({},{},{})", self.p, self.q, self.r)
    }
}

/// Sign of the blade product e_a e_b, in {-1, 0, +1}, by exact integer
/// bookkeeping: one transposition sign per generator swap needed to sort the
/// concatenation, times the metric square of every shared generator.
fn blade_sign_raw(sig: Signature, a: Blade, b: Blade) -> i8 {
    let mut transpositions: u32 = 0;
    let mut bb = b;
    while bb != 0 {
        let g = bb.trailing_zeros() as usize;
        // generators of `a` strictly above position g must hop over e_{g+1}
        transpositions += (a >> (g + 1)).count_ones();
        bb &= bb - 1;
    }
    let mut sign: i8 = if transpositions % 2 == 0 { 1 } else { -1 };
    let mut shared = a & b;
    while shared != 0 {
        let g = shared.trailing_zeros() as usize;
        match sig.eta(g + 1) {
            0 => return 0,
            -1 => sign = -sign,
            _ => {}
        }
        shared &= shared - 1;
    }
    sign
}

/// Product of two basis blades: `(sign, result_mask)` with
/// `result_mask = a ^ b`. Sign is 0 exactly when a shared generator is
/// radical.
pub fn blade_product(sig: Signature, a: Blade, b: Blade) -> (f64, Blade) {
    debug_assert!(a < sig.dim() && b < sig.dim());
    (blade_sign_raw(sig, a, b) as f64, a ^ b)
}

/// Precomputed per-signature tables. Built once per signature via
/// [`algebra`] and shared behind an `Arc`; read-only afterwards.
pub struct Algebra {
    sig: Signature,
    dim: usize,
    grade: Vec<u8>,
    qt: Vec<u8>,
    /// Full sign table for n <= 8 (dim*dim entries, row-major), else computed
    /// on the fly.
    sign_table: Option<Vec<i8>>,
    hat_sign: Vec<f64>,
    rev_sign: Vec<f64>,
    conj_sign: Vec<f64>,
    /// Sign of e_m e_m per blade (0 when the blade touches the radical).
    square_sign: Vec<i8>,
}

impl Algebra {
    fn build(sig: Signature) -> Algebra {
        let dim = sig.dim();
        let mut grade_v = vec![0u8; dim];
        let mut qt = vec![0u8; dim];
        let mut hat = vec![0.0; dim];
        let mut rev = vec![0.0; dim];
        let mut conj = vec![0.0; dim];
        let mut square = vec![0i8; dim];
        for m in 0..dim {
            let k = grade(m);
            grade_v[m] = k as u8;
            qt[m] = (k % 4) as u8;
            let h = if k % 2 == 0 { 1.0 } else { -1.0 };
            let t = if (k * (k.saturating_sub(1)) / 2) % 2 == 0 { 1.0 } else { -1.0 };
            hat[m] = h;
            rev[m] = t;
            conj[m] = h * t;
            square[m] = blade_sign_raw(sig, m, m);
        }
        let sign_table = if sig.n() <= 8 {
            let mut t = vec![0i8; dim * dim];
            for a in 0..dim {
                for b in 0..dim {
                    t[a * dim + b] = blade_sign_raw(sig, a, b);
                }
            }
            Some(t)
        } else {
            None
        };
        Algebra { sig, dim, grade: grade_v, qt, sign_table, hat_sign: hat, rev_sign: rev, conj_sign: conj, square_sign: square }
    }

    pub fn sig(&self) -> Signature {
        self.sig
    }

    pub fn n(&self) -> usize {
        self.sig.n()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn blade_sign(&self, a: Blade, b: Blade) -> i8 {
        match &self.sign_table {
            Some(t) => t[a * self.dim + b],
            None => blade_sign_raw(self.sig, a, b),
        }
    }

    #[inline]
    pub fn grade_of(&self, m: Blade) -> usize {
        self.grade[m] as usize
    }

    /// Quaternion type of a blade: grade mod 4.
    #[inline]
    pub fn qt_of(&self, m: Blade) -> usize {
        self.qt[m] as usize
    }

    pub fn hat_signs(&self) -> &[f64] {
        &self.hat_sign
    }

    pub fn rev_signs(&self) -> &[f64] {
        &self.rev_sign
    }

    pub fn conj_signs(&self) -> &[f64] {
        &self.conj_sign
    }

    /// Sign s with e_m e_m = s e, per blade.
    pub fn square_signs(&self) -> &[i8] {
        &self.square_sign
    }
}

static CACHE: OnceLock<Mutex<HashMap<Signature, Arc<Algebra>>>> = OnceLock::new();

/// Shared, memoized table set for a signature. Cheap to call repeatedly.
pub fn algebra(sig: Signature) -> Arc<Algebra> {
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut map = cache.lock().expect("algebra cache poisoned");
    Arc::clone(map.entry(sig).or_insert_with(|| Arc::new(Algebra::build(sig))))
}

/// Dense multivector: 2^n coefficients over a fixed signature.
///
/// Values are immutable in spirit; arithmetic returns fresh multivectors.
/// Mixing signatures in one operation panics (that is a programming error,
/// not a data error).
#[derive(Clone)]
pub struct Multivector {
    alg: Arc<Algebra>,
    coeffs: Vec<f64>,
}

impl Multivector {
    pub fn zero(sig: Signature) -> Multivector {
        let alg = algebra(sig);
        let dim = alg.dim();
        Multivector { alg, coeffs: vec![0.0; dim] }
    }

    pub fn scalar(sig: Signature, c: f64) -> Multivector {
        let mut x = Multivector::zero(sig);
        x.coeffs[0] = c;
        x
    }

    /// The identity element e.
    pub fn one(sig: Signature) -> Multivector {
        Multivector::scalar(sig, 1.0)
    }

    /// Basis blade e_mask with coefficient 1.
    pub fn basis_blade(sig: Signature, mask: Blade) -> Result<Multivector> {
        if mask >= sig.dim() {
            return Err(Error::Parse(format!("blade mask {mask:#x} out of range for {sig}")));
        }
        let mut x = Multivector::zero(sig);
        x.coeffs[mask] = 1.0;
        Ok(x)
    }

    /// Generator e_a, 1-based.
    pub fn basis_vector(sig: Signature, a: usize) -> Result<Multivector> {
        if a < 1 || a > sig.n() {
            return Err(Error::Parse(format!("generator index {a} out of range for {sig}")));
        }
        Multivector::basis_blade(sig, 1usize << (a - 1))
    }

    /// Grade-1 element with the given coordinates (length n).
    pub fn vector(sig: Signature, coords: &[f64]) -> Result<Multivector> {
        if coords.len() != sig.n() {
            return Err(Error::Parse(format!(
                "expected {} coordinates for {sig}, got {}",
                sig.n(),
                coords.len()
            )));
        }
        let mut x = Multivector::zero(sig);
        for (i, &c) in coords.iter().enumerate() {
            x.coeffs[1usize << i] = c;
        }
        Ok(x)
    }

    pub fn from_coeffs(sig: Signature, coeffs: Vec<f64>) -> Result<Multivector> {
        if coeffs.len() != sig.dim() {
            return Err(Error::Parse(format!(
                "expected {} coefficients for {sig}, got {}",
                sig.dim(),
                coeffs.len()
            )));
        }
        Ok(Multivector { alg: algebra(sig), coeffs })
    }

    pub fn sig(&self) -> Signature {
        self.alg.sig()
    }

    pub fn alg(&self) -> &Arc<Algebra> {
        &self.alg
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeff(&self, mask: Blade) -> f64 {
        self.coeffs[mask]
    }

    pub fn set_coeff(&mut self, mask: Blade, c: f64) {
        self.coeffs[mask] = c;
    }

    /// Coefficient of the identity blade.
    pub fn scalar_part(&self) -> f64 {
        self.coeffs[0]
    }

    /// Grade-1 coordinates, length n.
    pub fn vector_part(&self) -> Vec<f64> {
        (0..self.alg.n()).map(|i| self.coeffs[1usize << i]).collect()
    }

    pub fn scale(&self, c: f64) -> Multivector {
        Multivector { alg: Arc::clone(&self.alg), coeffs: self.coeffs.iter().map(|x| x * c).collect() }
    }

    /// Full geometric product, bilinear double loop over nonzero terms.
    pub fn geometric_product(&self, rhs: &Multivector) -> Multivector {
        assert_eq!(self.sig(), rhs.sig(), "geometric product across signatures");
        let alg = &self.alg;
        let dim = alg.dim();
        let mut out = vec![0.0; dim];
        for a in 0..dim {
            let xa = self.coeffs[a];
            if xa == 0.0 {
                continue;
            }
            for b in 0..dim {
                let yb = rhs.coeffs[b];
                if yb == 0.0 {
                    continue;
                }
                let s = alg.blade_sign(a, b);
                if s != 0 {
                    out[a ^ b] += s as f64 * xa * yb;
                }
            }
        }
        Multivector { alg: Arc::clone(alg), coeffs: out }
    }

    pub fn norm_inf(&self) -> f64 {
        self.coeffs.iter().fold(0.0, |m, c| m.max(c.abs()))
    }

    pub fn max_abs_diff(&self, other: &Multivector) -> f64 {
        assert_eq!(self.sig(), other.sig(), "comparison across signatures");
        self.coeffs
            .iter()
            .zip(&other.coeffs)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Relative distance: max abs coefficient difference over the larger of
    /// the two infinity norms (floored at 1e-12 so zeros compare cleanly).
    pub fn rel_diff(&self, other: &Multivector) -> f64 {
        let scale = self.norm_inf().max(other.norm_inf()).max(1e-12);
        self.max_abs_diff(other) / scale
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs.iter().all(|c| c.is_finite())
    }

    /// Serialize in the `<coeff>*e_<indices>` text format, terms joined by
    /// " + ". The identity blade prints as `e`; the zero multivector as
    /// `0*e`. Indices are concatenated digits for n <= 9 and
    /// underscore-separated beyond that.
    pub fn to_text(&self) -> String {
        let n = self.alg.n();
        let mut terms = Vec::new();
        for (mask, &c) in self.coeffs.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            terms.push(format!("{}*{}", c, blade_name(mask, n)));
        }
        if terms.is_empty() {
            return "0*e".to_string();
        }
        terms.join(" + ")
    }

    /// Parse the [`to_text`](Self::to_text) format. Repeated blades
    /// accumulate.
    pub fn parse(sig: Signature, s: &str) -> Result<Multivector> {
        let mut x = Multivector::zero(sig);
        for raw_term in s.split('+') {
            let term = raw_term.trim();
            if term.is_empty() {
                return Err(Error::Parse(format!("empty term in {s:?}")));
            }
            let (coeff_s, blade_s) = match term.split_once('*') {
                Some(pair) => pair,
                None => return Err(Error::Parse(format!("term {term:?} lacks '*'"))),
            };
            let c: f64 = coeff_s
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("bad coefficient {coeff_s:?}")))?;
            let mask = parse_blade_name(blade_s.trim(), sig)?;
            x.coeffs[mask] += c;
        }
        Ok(x)
    }
}

fn blade_name(mask: Blade, n: usize) -> String {
    if mask == 0 {
        return "e".to_string();
    }
    let idx: Vec<String> = (0..n)
        .filter(|i| mask & (1 << i) != 0)
        .map(|i| (i + 1).to_string())
        .collect();
    if n <= 9 {
        format!("e_{}", idx.concat())
    } else {
        format!("e_{}", idx.join("_"))
    }
}

fn parse_blade_name(s: &str, sig: Signature) -> Result<Blade> {
    if s == "e" {
        return Ok(0);
    }
    let body = s
        .strip_prefix("e_")
        .ok_or_else(|| Error::Parse(format!("bad blade token {s:?}")))?;
    let mut mask: Blade = 0;
    let indices: Vec<usize> = if body.contains('_') {
        body.split('_')
            .map(|part| part.parse::<usize>().map_err(|_| Error::Parse(format!("bad blade token {s:?}"))))
            .collect::<Result<Vec<_>>>()?
    } else {
        body.chars()
            .map(|ch| {
                ch.to_digit(10)
                    .map(|d| d as usize)
                    .ok_or_else(|| Error::Parse(format!("bad blade token {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?
    };
    for a in indices {
        if a < 1 || a > sig.n() {
            return Err(Error::Parse(format!("generator index {a} out of range for {sig}")));
        }
        let bit = 1usize << (a - 1);
        if mask & bit != 0 {
            return Err(Error::Parse(format!("repeated generator {a} in blade token {s:?}")));
        }
        mask |= bit;
    }
    Ok(mask)
}

impl PartialEq for Multivector {
    fn eq(&self, other: &Self) -> bool {
        self.sig() == other.sig() && self.coeffs == other.coeffs
    }
}

impl fmt::Debug for Multivector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} [{}]", self.to_text(), self.sig())
    }
}

impl fmt::Display for Multivector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

impl Add for &Multivector {
    type Output = Multivector;
    fn add(self, rhs: &Multivector) -> Multivector {
        assert_eq!(self.sig(), rhs.sig(), "addition across signatures");
        Multivector {
            alg: Arc::clone(&self.alg),
            coeffs: self.coeffs.iter().zip(&rhs.coeffs).map(|(a, b)| a + b).collect(),
        }
    }
}

impl Sub for &Multivector {
    type Output = Multivector;
    fn sub(self, rhs: &Multivector) -> Multivector {
        assert_eq!(self.sig(), rhs.sig(), "subtraction across signatures");
        Multivector {
            alg: Arc::clone(&self.alg),
            coeffs: self.coeffs.iter().zip(&rhs.coeffs).map(|(a, b)| a - b).collect(),
        }
    }
}

impl Neg for &Multivector {
    type Output = Multivector;
    fn neg(self) -> Multivector {
        self.scale(-1.0)
    }
}

impl Mul for &Multivector {
    type Output = Multivector;
    fn mul(self, rhs: &Multivector) -> Multivector {
        self.geometric_product(rhs)
    }
}
