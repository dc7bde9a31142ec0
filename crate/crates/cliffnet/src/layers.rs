//! Equivariant layer zoo over channel batches.
//!
//! A channel batch is a rank-3 tensor [batch, channels, 2^n] whose last
//! axis indexes blades of a fixed signature. Every layer here commutes with
//! the twisted adjoint action of the Lipschitz group applied blade-wise to
//! each channel; the quaternion-type layers get that for free because they
//! only ever combine inputs through type projections and geometric
//! products. Grade-wise variants of the linear and product layers are kept
//! for parameter-count comparison.

use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::algebra::{algebra, Algebra, Multivector, Signature};
use crate::autodiff::{GpTable, SignMode, Tape, Tensor, Var};
use crate::error::Error;
use crate::Result;

/// Per-signature constants shared by every layer: blade-to-group maps, the
/// reversion-weighted square signs, and the geometric-product table.
#[derive(Clone)]
pub struct LayerCtx {
    sig: Signature,
    alg: Arc<Algebra>,
    qt_map: Arc<Vec<usize>>,
    grade_map: Arc<Vec<usize>>,
    type_ident: Arc<Vec<usize>>,
    /// rev sign times squared-blade sign per blade: the weights that turn
    /// sum of squared coefficients into scalar_part(rev(x) x).
    w0: Arc<Vec<f64>>,
    table: Arc<GpTable>,
}

pub const QT_GROUPS: usize = 4;

impl LayerCtx {
    pub fn new(sig: Signature) -> LayerCtx {
        let alg = algebra(sig);
        let dim = alg.dim();
        let qt_map = Arc::new((0..dim).map(|m| alg.qt_of(m)).collect::<Vec<_>>());
        let grade_map = Arc::new((0..dim).map(|m| alg.grade_of(m)).collect::<Vec<_>>());
        let w0 = Arc::new(
            (0..dim)
                .map(|m| alg.rev_signs()[m] as f64 * alg.square_signs()[m] as f64)
                .collect::<Vec<_>>(),
        );
        let table = Arc::new(GpTable::new(&alg));
        LayerCtx {
            sig,
            alg,
            qt_map,
            grade_map,
            type_ident: Arc::new((0..QT_GROUPS).collect()),
            w0,
            table,
        }
    }

    pub fn sig(&self) -> Signature {
        self.sig
    }

    pub fn alg(&self) -> &Arc<Algebra> {
        &self.alg
    }

    pub fn qt_map(&self) -> &Arc<Vec<usize>> {
        &self.qt_map
    }

    pub fn grade_map(&self) -> &Arc<Vec<usize>> {
        &self.grade_map
    }
}

/// Layer descriptor; channel counts are part of the descriptor so shapes
/// and parameter counts are fixed before initialization.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerKind {
    /// Per-channel, per-grade learned signs applied through the grade
    /// decomposition (a trainable conjugation-style operation).
    Conjugation { channels: usize, mode: SignMode },
    /// Channel mixing acting independently on the four quaternion types.
    QtLinear { c_in: usize, c_out: usize },
    /// Pre-mix plus the type-projected geometric product of input and pre-mix.
    QtProduct { channels: usize },
    /// Per-type scale normalization toward unit invariant norm.
    QtNorm { channels: usize },
    /// Residual MLP on the grade-0 slice only.
    ScalarGate { channels: usize, hidden: usize },
    /// Grade-wise channel mixing (comparison baseline).
    GradeLinear { c_in: usize, c_out: usize },
    /// Grade-wise product layer (comparison baseline).
    GradeProduct { channels: usize },
}

impl LayerKind {
    pub fn in_channels(&self) -> usize {
        match *self {
            LayerKind::Conjugation { channels, .. }
            | LayerKind::QtProduct { channels }
            | LayerKind::QtNorm { channels }
            | LayerKind::ScalarGate { channels, .. }
            | LayerKind::GradeProduct { channels } => channels,
            LayerKind::QtLinear { c_in, .. } | LayerKind::GradeLinear { c_in, .. } => c_in,
        }
    }

    pub fn out_channels(&self) -> usize {
        match *self {
            LayerKind::QtLinear { c_out, .. } | LayerKind::GradeLinear { c_out, .. } => c_out,
            _ => self.in_channels(),
        }
    }

    /// Names of the parameter tensors, in storage order.
    pub fn param_names(&self) -> &'static [&'static str] {
        match self {
            LayerKind::Conjugation { .. } => &["raw"],
            LayerKind::QtLinear { .. } | LayerKind::GradeLinear { .. } => &["phi"],
            LayerKind::QtProduct { .. } | LayerKind::GradeProduct { .. } => &["mix", "phi"],
            LayerKind::QtNorm { .. } => &["phi"],
            LayerKind::ScalarGate { .. } => &["w1", "b1", "w2", "b2"],
        }
    }

    /// Whether each parameter tensor takes weight decay, in storage order.
    /// Mixing and product weights decay; biases, normalization scales, and
    /// the quantized conjugation signs are exempt.
    pub fn param_decays(&self) -> &'static [bool] {
        match self {
            LayerKind::Conjugation { .. } => &[false],
            LayerKind::QtLinear { .. } | LayerKind::GradeLinear { .. } => &[true],
            LayerKind::QtProduct { .. } | LayerKind::GradeProduct { .. } => &[true, true],
            LayerKind::QtNorm { .. } => &[false],
            LayerKind::ScalarGate { .. } => &[true, false, true, false],
        }
    }

    pub fn param_shapes(&self, n: usize) -> Vec<Vec<usize>> {
        let g = n + 1;
        match *self {
            LayerKind::Conjugation { channels, .. } => vec![vec![channels, g]],
            LayerKind::QtLinear { c_in, c_out } => vec![vec![c_out, c_in, QT_GROUPS]],
            LayerKind::QtProduct { channels } => vec![
                vec![channels, channels, QT_GROUPS],
                vec![channels, QT_GROUPS, QT_GROUPS, QT_GROUPS],
            ],
            LayerKind::QtNorm { channels } => vec![vec![channels, QT_GROUPS]],
            LayerKind::ScalarGate { channels, hidden } => vec![
                vec![channels, hidden],
                vec![hidden],
                vec![hidden, channels],
                vec![channels],
            ],
            LayerKind::GradeLinear { c_in, c_out } => vec![vec![c_out, c_in, g]],
            LayerKind::GradeProduct { channels } => {
                vec![vec![channels, channels, g], vec![channels, g, g, g]]
            }
        }
    }

    /// Closed-form parameter count; matches the sum of shape products.
    pub fn param_count(&self, n: usize) -> usize {
        match *self {
            LayerKind::Conjugation { channels, .. } => channels * (n + 1),
            LayerKind::QtLinear { c_in, c_out } => 4 * c_in * c_out,
            LayerKind::QtProduct { channels } => 4 * channels * channels + 64 * channels,
            LayerKind::QtNorm { channels } => 4 * channels,
            LayerKind::ScalarGate { channels, hidden } => {
                2 * channels * hidden + hidden + channels
            }
            LayerKind::GradeLinear { c_in, c_out } => (n + 1) * c_in * c_out,
            LayerKind::GradeProduct { channels } => {
                (n + 1) * channels * channels + (n + 1).pow(3) * channels
            }
        }
    }

    /// Fresh parameter tensors. Linear mixings use fan-in scaled normals,
    /// product coefficients a fixed 1/4 scale, normalization starts at the
    /// sigmoid midpoint, conjugation starts all-positive (near identity),
    /// gate biases at zero.
    pub fn init<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<Tensor> {
        let g = n + 1;
        match *self {
            LayerKind::Conjugation { channels, .. } => {
                vec![Tensor::rand_uniform(&[channels, g], 0.5, 1.5, rng)]
            }
            LayerKind::QtLinear { c_in, c_out } => {
                let std = 1.0 / (4.0 * c_in as f64).sqrt();
                vec![Tensor::randn(&[c_out, c_in, QT_GROUPS], std, rng)]
            }
            LayerKind::QtProduct { channels } => {
                let std_mix = 1.0 / (4.0 * channels as f64).sqrt();
                vec![
                    Tensor::randn(&[channels, channels, QT_GROUPS], std_mix, rng),
                    Tensor::randn(&[channels, QT_GROUPS, QT_GROUPS, QT_GROUPS], 0.25, rng),
                ]
            }
            LayerKind::QtNorm { channels } => vec![Tensor::zeros(&[channels, QT_GROUPS])],
            LayerKind::ScalarGate { channels, hidden } => vec![
                Tensor::randn(&[channels, hidden], 1.0 / (channels as f64).sqrt(), rng),
                Tensor::zeros(&[hidden]),
                Tensor::randn(&[hidden, channels], 1.0 / (hidden as f64).sqrt(), rng),
                Tensor::zeros(&[channels]),
            ],
            LayerKind::GradeLinear { c_in, c_out } => {
                let std = 1.0 / (g as f64 * c_in as f64).sqrt();
                vec![Tensor::randn(&[c_out, c_in, g], std, rng)]
            }
            LayerKind::GradeProduct { channels } => {
                let std_mix = 1.0 / (g as f64 * channels as f64).sqrt();
                let std_phi = 1.0 / (g as f64).powf(1.5);
                vec![
                    Tensor::randn(&[channels, channels, g], std_mix, rng),
                    Tensor::randn(&[channels, g, g, g], std_phi, rng),
                ]
            }
        }
    }

    /// Record the layer's forward pass; `params` are the traced parameter
    /// tensors in `param_names` order.
    pub fn forward(&self, tape: &mut Tape, ctx: &LayerCtx, x: Var, params: &[Var]) -> Var {
        match *self {
            LayerKind::Conjugation { mode, .. } => {
                let signs = tape.sign_st(params[0], mode);
                tape.group_scale_param(x, signs, ctx.grade_map.clone())
            }
            LayerKind::QtLinear { .. } => tape.grouped_matmul(x, params[0], ctx.qt_map.clone()),
            LayerKind::QtProduct { .. } => {
                let y = tape.grouped_matmul(x, params[0], ctx.qt_map.clone());
                let prod =
                    tape.grouped_bilinear(x, y, params[1], ctx.table.clone(), ctx.qt_map.clone());
                tape.add(y, prod)
            }
            LayerKind::QtNorm { .. } => {
                qt_norm_forward(tape, ctx, x, params[0], ctx.qt_map.clone(), ctx.type_ident.clone())
            }
            LayerKind::ScalarGate { .. } => {
                let x0 = tape.take_blade(x, 0);
                let h = tape.matmul(x0, params[0]);
                let h = tape.add_bias(h, params[1]);
                let h = tape.silu(h);
                let o = tape.matmul(h, params[2]);
                let o = tape.add_bias(o, params[3]);
                let gated = tape.add(x0, o);
                tape.set_blade(x, gated, 0)
            }
            LayerKind::GradeLinear { .. } => {
                tape.grouped_matmul(x, params[0], ctx.grade_map.clone())
            }
            LayerKind::GradeProduct { .. } => {
                let y = tape.grouped_matmul(x, params[0], ctx.grade_map.clone());
                let prod = tape.grouped_bilinear(
                    x,
                    y,
                    params[1],
                    ctx.table.clone(),
                    ctx.grade_map.clone(),
                );
                tape.add(y, prod)
            }
        }
    }
}

/// Divide each group part by s = sigmoid(phi) (q - 1) + 1 where q is the
/// invariant scalar_part(rev(part) part), with |s| clamped away from zero.
fn qt_norm_forward(
    tape: &mut Tape,
    ctx: &LayerCtx,
    x: Var,
    phi: Var,
    map: Arc<Vec<usize>>,
    ident: Arc<Vec<usize>>,
) -> Var {
    let n_groups = ident.len();
    let sq = tape.square(x);
    let weighted = tape.blade_scale(sq, ctx.w0.clone());
    let q = tape.group_reduce(weighted, map.clone(), n_groups);
    let q_m1 = tape.affine(q, 1.0, -1.0);
    let sig_phi = tape.sigmoid(phi);
    let scaled = tape.group_scale_param(q_m1, sig_phi, ident);
    let s = tape.affine(scaled, 1.0, 1.0);
    let r = tape.recip_clamped(s, 1e-6);
    tape.group_scale_batch(x, r, map)
}

/// Stack of layers over one signature with a flat parameter store.
pub struct Model {
    ctx: LayerCtx,
    layers: Vec<LayerKind>,
    params: Vec<Tensor>,
    ranges: Vec<std::ops::Range<usize>>,
    in_channels: usize,
    /// Negative control: when set, a constant grade-1 bias is added after
    /// this layer index, deliberately breaking equivariance.
    pub break_layer: Option<usize>,
}

impl Model {
    pub fn new(
        sig: Signature,
        in_channels: usize,
        layers: Vec<LayerKind>,
        seed: u64,
    ) -> Result<Model> {
        let ctx = LayerCtx::new(sig);
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut ranges = Vec::new();
        let mut channels = in_channels;
        for (i, layer) in layers.iter().enumerate() {
            if layer.in_channels() != channels {
                return Err(Error::Config(format!(
                    "layer {i} expects {} input channels, got {channels}",
                    layer.in_channels()
                )));
            }
            channels = layer.out_channels();
            let start = params.len();
            let tensors = layer.init(sig.n(), &mut rng);
            let counted: usize = tensors.iter().map(Tensor::len).sum();
            assert_eq!(
                counted,
                layer.param_count(sig.n()),
                "parameter count formula out of sync for {layer:?}"
            );
            params.extend(tensors);
            ranges.push(start..params.len());
        }
        Ok(Model { ctx, layers, params, ranges, in_channels, break_layer: None })
    }

    pub fn ctx(&self) -> &LayerCtx {
        &self.ctx
    }

    pub fn sig(&self) -> Signature {
        self.ctx.sig
    }

    pub fn layers(&self) -> &[LayerKind] {
        &self.layers
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(self.in_channels, LayerKind::out_channels)
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_count(self.ctx.sig.n())).sum()
    }

    /// Per-tensor weight-decay flags in canonical parameter order.
    pub fn decay_mask(&self) -> Vec<bool> {
        self.layers.iter().flat_map(|l| l.param_decays().iter().copied()).collect()
    }

    /// Parameter tensors with stable names "{layer index}.{tensor name}".
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, (layer, range)) in self.layers.iter().zip(&self.ranges).enumerate() {
            for (name, t) in layer.param_names().iter().zip(&self.params[range.clone()]) {
                out.push((format!("{i}.{name}"), t));
            }
        }
        out
    }

    /// Replace parameters from a named map; every tensor must be present
    /// with a matching shape.
    pub fn load_named_params(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        let names: Vec<String> = self.named_params().iter().map(|(n, _)| n.clone()).collect();
        for (idx, name) in names.iter().enumerate() {
            let found = tensors
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::Config(format!("checkpoint is missing tensor {name}")))?;
            if found.1.shape() != self.params[idx].shape() {
                return Err(Error::Config(format!(
                    "checkpoint tensor {name} has shape {:?}, expected {:?}",
                    found.1.shape(),
                    self.params[idx].shape()
                )));
            }
            self.params[idx] = found.1.clone();
        }
        Ok(())
    }

    /// Trace the full forward pass. Returns the output variable and the
    /// traced parameter variables in storage order (for gradient lookup).
    pub fn forward_on_tape(&self, tape: &mut Tape, x: Var) -> (Var, Vec<Var>) {
        let (outs, pvars) = self.forward_trace(tape, x);
        (*outs.last().unwrap_or(&x), pvars)
    }

    fn forward_trace(&self, tape: &mut Tape, x: Var) -> (Vec<Var>, Vec<Var>) {
        let pvars: Vec<Var> = self.params.iter().map(|t| tape.leaf(t.clone())).collect();
        let mut outs = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for (i, (layer, range)) in self.layers.iter().zip(&self.ranges).enumerate() {
            h = layer.forward(tape, &self.ctx, h, &pvars[range.clone()]);
            if self.break_layer == Some(i) {
                h = self.inject_vector_bias(tape, h);
            }
            outs.push(h);
        }
        (outs, pvars)
    }

    /// Plain (untraced) forward evaluation.
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let (out, _) = self.forward_on_tape(&mut tape, xv);
        tape.value(out).clone()
    }

    /// Forward evaluation keeping the output of every layer, in order.
    pub fn forward_collect(&self, x: &Tensor) -> Vec<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let (outs, _) = self.forward_trace(&mut tape, xv);
        outs.iter().map(|v| tape.value(*v).clone()).collect()
    }

    fn inject_vector_bias(&self, tape: &mut Tape, h: Var) -> Var {
        let shape = tape.value(h).shape().to_vec();
        let mut bias = Tensor::zeros(&shape);
        let d = shape[2];
        for row in bias.data_mut().chunks_mut(d) {
            row[1] = 1.0; // blade e_1
        }
        let b = tape.leaf(bias);
        tape.add(h, b)
    }
}

/// Pack per-sample channel lists into a [B, L, 2^n] tensor.
pub fn batch_from_multivectors(sig: Signature, rows: &[Vec<Multivector>]) -> Tensor {
    let dim = sig.dim();
    let l = rows.first().map_or(0, Vec::len);
    let mut data = Vec::with_capacity(rows.len() * l * dim);
    for row in rows {
        assert_eq!(row.len(), l, "ragged channel batch");
        for mv in row {
            assert_eq!(mv.sig(), sig, "signature mismatch in batch");
            data.extend_from_slice(mv.coeffs());
        }
    }
    Tensor::from_vec(&[rows.len(), l, dim], data)
}

/// Unpack a [B, L, 2^n] tensor into per-sample channel lists.
pub fn multivectors_from_batch(sig: Signature, t: &Tensor) -> Vec<Vec<Multivector>> {
    let shape = t.shape();
    assert_eq!(shape.len(), 3, "expected a channel batch");
    let (b, l, d) = (shape[0], shape[1], shape[2]);
    assert_eq!(d, sig.dim(), "blade axis does not match signature");
    let mut rows = Vec::with_capacity(b);
    for bi in 0..b {
        let mut row = Vec::with_capacity(l);
        for li in 0..l {
            let start = (bi * l + li) * d;
            let coeffs = t.data()[start..start + d].to_vec();
            row.push(Multivector::from_coeffs(sig, coeffs).expect("length matches"));
        }
        rows.push(row);
    }
    rows
}

/// Twisted adjoint of a versor applied to every channel of a batch.
pub fn transform_batch(t: &crate::groups::Versor, x: &Tensor) -> Tensor {
    let rows = multivectors_from_batch(t.sig(), x);
    let out: Vec<Vec<Multivector>> = rows
        .iter()
        .map(|row| row.iter().map(|mv| t.twisted_adjoint(mv)).collect())
        .collect();
    batch_from_multivectors(t.sig(), &out)
}

/// Relative difference between two same-shape tensors: max abs difference
/// over the larger of the two max-abs entries, floored at 1e-12.
pub fn tensor_rel_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "shape mismatch in comparison");
    let mut diff = 0.0f64;
    let mut scale = 1e-12f64;
    for (x, y) in a.data().iter().zip(b.data()) {
        diff = diff.max((x - y).abs());
        scale = scale.max(x.abs()).max(y.abs());
    }
    diff / scale
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::groups::{random_multivector, sample_lipschitz};

    fn random_batch(sig: Signature, b: usize, l: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let rows: Vec<Vec<Multivector>> = (0..b)
            .map(|_| (0..l).map(|_| random_multivector(sig, &mut rng)).collect())
            .collect();
        batch_from_multivectors(sig, &rows)
    }

    fn run_layer(kind: &LayerKind, ctx: &LayerCtx, params: &[Tensor], x: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let pvars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = kind.forward(&mut tape, ctx, xv, &pvars);
        tape.value(out).clone()
    }

    #[test]
    fn parameter_counts_match_formulas() {
        let n = 5;
        let cases: Vec<(LayerKind, usize)> = vec![
            (LayerKind::Conjugation { channels: 8, mode: SignMode::Direct }, 48),
            (LayerKind::QtLinear { c_in: 8, c_out: 8 }, 256),
            (LayerKind::QtProduct { channels: 8 }, 4 * 64 + 64 * 8),
            (LayerKind::QtNorm { channels: 8 }, 32),
            (LayerKind::GradeLinear { c_in: 8, c_out: 8 }, 6 * 64),
            (LayerKind::GradeProduct { channels: 8 }, 6 * 64 + 216 * 8),
            (LayerKind::ScalarGate { channels: 8, hidden: 16 }, 2 * 8 * 16 + 16 + 8),
        ];
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        for (kind, want) in cases {
            assert_eq!(kind.param_count(n), want, "{kind:?}");
            let total: usize = kind.init(n, &mut rng).iter().map(Tensor::len).sum();
            assert_eq!(total, want, "{kind:?} tensors");
        }
    }

    #[test]
    fn conjugation_all_positive_is_identity() {
        let sig = Signature::new(3, 0, 0).unwrap();
        let ctx = LayerCtx::new(sig);
        let kind = LayerKind::Conjugation { channels: 2, mode: SignMode::Direct };
        let raw = Tensor::filled(&[2, 4], 10.0);
        let x = random_batch(sig, 3, 2, 1);
        let out = run_layer(&kind, &ctx, &[raw], &x);
        assert_eq!(out, x);
    }

    #[test]
    fn conjugation_alternating_signs_is_grade_involution() {
        let sig = Signature::new(1, 3, 0).unwrap();
        let ctx = LayerCtx::new(sig);
        let kind = LayerKind::Conjugation { channels: 1, mode: SignMode::SigmoidRescale };
        let raw =
            Tensor::from_vec(&[1, 5], (0..5).map(|k| if k % 2 == 0 { 7.0 } else { -7.0 }).collect());
        let x = random_batch(sig, 4, 1, 2);
        let out = run_layer(&kind, &ctx, &[raw], &x);
        for (row_in, row_out) in multivectors_from_batch(sig, &x)
            .iter()
            .zip(multivectors_from_batch(sig, &out).iter())
        {
            assert!(row_out[0].max_abs_diff(&row_in[0].grade_involution()) < 1e-15);
        }
    }

    #[test]
    fn qt_linear_identity_and_type_zero_restriction() {
        let sig = Signature::new(3, 0, 0).unwrap();
        let ctx = LayerCtx::new(sig);
        let kind = LayerKind::QtLinear { c_in: 3, c_out: 3 };
        let mut phi = Tensor::zeros(&[3, 3, 4]);
        for c in 0..3 {
            for k in 0..4 {
                phi.data_mut()[(c * 3 + c) * 4 + k] = 1.0;
            }
        }
        let x = random_batch(sig, 2, 3, 3);
        let out = run_layer(&kind, &ctx, &[phi.clone()], &x);
        assert!(tensor_rel_diff(&out, &x) < 1e-15);

        // zero out every type but 0: output must live in the type-0 span
        for c1 in 0..3 {
            for c2 in 0..3 {
                for k in 1..4 {
                    phi.data_mut()[(c1 * 3 + c2) * 4 + k] = 0.0;
                }
            }
        }
        let out0 = run_layer(&kind, &ctx, &[phi], &x);
        for row in multivectors_from_batch(sig, &out0) {
            for mv in row {
                for mask in 0..sig.dim() {
                    if ctx.alg.qt_of(mask) != 0 {
                        assert_eq!(mv.coeff(mask), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn qt_linear_is_linear_in_its_input() {
        let sig = Signature::new(2, 0, 1).unwrap();
        let ctx = LayerCtx::new(sig);
        let kind = LayerKind::QtLinear { c_in: 2, c_out: 3 };
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let params = kind.init(sig.n(), &mut rng);
        let x = random_batch(sig, 2, 2, 5);
        let y = random_batch(sig, 2, 2, 6);
        let (a, b) = (0.7, -2.3);
        let mut combo = x.clone();
        for (c, (xi, yi)) in combo.data_mut().iter_mut().zip(x.data().iter().zip(y.data())) {
            *c = a * xi + b * yi;
        }
        let lhs = run_layer(&kind, &ctx, &params, &combo);
        let fx = run_layer(&kind, &ctx, &params, &x);
        let fy = run_layer(&kind, &ctx, &params, &y);
        let mut rhs = fx.clone();
        for (c, (xi, yi)) in rhs.data_mut().iter_mut().zip(fx.data().iter().zip(fy.data())) {
            *c = a * xi + b * yi;
        }
        assert!(tensor_rel_diff(&lhs, &rhs) < 1e-12);
    }

    #[test]
    fn qt_product_zero_and_scalar_unit_cases() {
        let sig = Signature::new(3, 0, 0).unwrap();
        let ctx = LayerCtx::new(sig);
        let kind = LayerKind::QtProduct { channels: 1 };
        let x = random_batch(sig, 2, 1, 7);
        let mix_id = {
            let mut t = Tensor::zeros(&[1, 1, 4]);
            t.data_mut().copy_from_slice(&[1.0, 1.0, 1.0, 1.0]);
            t
        };
        // zero phi kills the product term: the layer reduces to its pre-mix
        let zero_phi = Tensor::zeros(&[1, 4, 4, 4]);
        let out = run_layer(&kind, &ctx, &[mix_id.clone(), zero_phi], &x);
        assert!(tensor_rel_diff(&out, &x) < 1e-15);

        // x = e, mix passes type 0 only, phi picks out the (0,0,0) cell:
        // out = e + e * e = 2e
        let e = batch_from_multivectors(sig, &[vec![Multivector::one(sig)]]);
        let mut mix0 = Tensor::zeros(&[1, 1, 4]);
        mix0.data_mut()[0] = 1.0;
        let mut phi = Tensor::zeros(&[1, 4, 4, 4]);
        phi.data_mut()[0] = 1.0;
        let out_e = run_layer(&kind, &ctx, &[mix0, phi], &e);
        let mut two_e = e.clone();
        for v in two_e.data_mut() {
            *v *= 2.0;
        }
        assert!(tensor_rel_diff(&out_e, &two_e) < 1e-15);
    }

    #[test]
    fn qt_norm_fixed_points_and_limit() {
        let sig = Signature::new(3, 0, 0).unwrap();
        let ctx = LayerCtx::new(sig);
        let kind = LayerKind::QtNorm { channels: 1 };
        // scalar e has invariant norm exactly 1: any phi leaves it alone
        let e = batch_from_multivectors(sig, &[vec![Multivector::one(sig)]]);
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let phi = Tensor::randn(&[1, 4], 2.0, &mut rng);
        let out = run_layer(&kind, &ctx, &[phi], &e);
        assert!(tensor_rel_diff(&out, &e) < 1e-12);

        // sigmoid(-40) ~ 0: divisor collapses to 1 and the layer is identity
        let x = random_batch(sig, 3, 1, 10);
        let frozen = Tensor::filled(&[1, 4], -40.0);
        let out_id = run_layer(&kind, &ctx, &[frozen], &x);
        assert!(tensor_rel_diff(&out_id, &x) < 1e-12);
    }

    #[test]
    fn qt_norm_shrinks_large_parts_toward_unit_invariant() {
        let sig = Signature::new(3, 0, 0).unwrap();
        let ctx = LayerCtx::new(sig);
        let kind = LayerKind::QtNorm { channels: 1 };
        // phi -> +inf: divisor -> q_k, so the normalized part has q ~ 1/q_k
        let x = batch_from_multivectors(
            sig,
            &[vec![Multivector::parse(sig, "3*e_1").unwrap()]],
        );
        let phi = Tensor::filled(&[1, 4], 40.0);
        let out = run_layer(&kind, &ctx, &[phi], &x);
        let mv = &multivectors_from_batch(sig, &out)[0][0];
        // q(3 e_1) = 9, so the new coefficient is 3/9
        assert!((mv.coeff(1) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn scalar_gate_zero_mlp_is_identity_and_never_touches_other_blades() {
        let sig = Signature::new(1, 3, 0).unwrap();
        let ctx = LayerCtx::new(sig);
        let kind = LayerKind::ScalarGate { channels: 3, hidden: 4 };
        let x = random_batch(sig, 2, 3, 11);
        let zeros = vec![
            Tensor::zeros(&[3, 4]),
            Tensor::zeros(&[4]),
            Tensor::zeros(&[4, 3]),
            Tensor::zeros(&[3]),
        ];
        let out = run_layer(&kind, &ctx, &zeros, &x);
        assert_eq!(out, x);

        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let params = kind.init(sig.n(), &mut rng);
        let out2 = run_layer(&kind, &ctx, &params, &x);
        let d = sig.dim();
        for (i, (a, b)) in x.data().iter().zip(out2.data()).enumerate() {
            if i % d != 0 {
                assert_eq!(a, b, "non-scalar blade changed at flat index {i}");
            }
        }
    }

    #[test]
    fn every_layer_is_equivariant_smoke() {
        let sigs = [Signature::new(1, 3, 0).unwrap(), Signature::new(2, 0, 1).unwrap()];
        for sig in sigs {
            let ctx = LayerCtx::new(sig);
            let kinds = vec![
                LayerKind::Conjugation { channels: 2, mode: SignMode::Direct },
                LayerKind::QtLinear { c_in: 2, c_out: 2 },
                LayerKind::QtProduct { channels: 2 },
                LayerKind::QtNorm { channels: 2 },
                LayerKind::ScalarGate { channels: 2, hidden: 3 },
                LayerKind::GradeLinear { c_in: 2, c_out: 2 },
                LayerKind::GradeProduct { channels: 2 },
            ];
            let mut rng = ChaCha20Rng::seed_from_u64(77);
            for kind in kinds {
                for draw in 0..3 {
                    let params = kind.init(sig.n(), &mut rng);
                    let x = random_batch(sig, 4, 2, 100 + draw);
                    let fx = run_layer(&kind, &ctx, &params, &x);
                    for vseed in 0..3 {
                        let t =
                            sample_lipschitz(sig, vseed, 2, usize::from(sig.r() > 0)).unwrap();
                        let tx = transform_batch(&t, &x);
                        let f_tx = run_layer(&kind, &ctx, &params, &tx);
                        let t_fx = transform_batch(&t, &fx);
                        let rel = tensor_rel_diff(&f_tx, &t_fx);
                        assert!(rel < 1e-8, "{kind:?} on {sig} versor {vseed}: rel {rel:.2e}");
                    }
                }
            }
        }
    }

    #[test]
    fn model_stack_gradient_matches_finite_differences() {
        let sig = Signature::new(2, 0, 0).unwrap();
        let layers = vec![
            LayerKind::QtLinear { c_in: 1, c_out: 2 },
            LayerKind::QtNorm { channels: 2 },
            LayerKind::QtProduct { channels: 2 },
            LayerKind::ScalarGate { channels: 2, hidden: 2 },
            LayerKind::QtLinear { c_in: 2, c_out: 1 },
        ];
        let model = Model::new(sig, 1, layers, 5).unwrap();
        let x = random_batch(sig, 3, 1, 13);
        let target = {
            let mut rng = ChaCha20Rng::seed_from_u64(14);
            Tensor::randn(&[3, 1], 1.0, &mut rng)
        };

        let loss_with = |params: &[Tensor]| -> f64 {
            let mut m2 = Model::new(sig, 1, model.layers().to_vec(), 5).unwrap();
            m2.params_mut().clone_from_slice(params);
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let (out, _) = m2.forward_on_tape(&mut tape, xv);
            let pred = tape.take_blade(out, 0);
            let tv = tape.leaf(target.clone());
            let diff = tape.sub(pred, tv);
            let sq = tape.square(diff);
            let loss = tape.mean(sq);
            tape.value(loss).item()
        };

        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let (out, pvars) = model.forward_on_tape(&mut tape, xv);
        let pred = tape.take_blade(out, 0);
        let tv = tape.leaf(target.clone());
        let diff = tape.sub(pred, tv);
        let sq = tape.square(diff);
        let loss = tape.mean(sq);
        let grads = tape.backward(loss);

        let h = 1e-6;
        let base_params: Vec<Tensor> = model.params().to_vec();
        let mut checked = 0;
        for (pi, p) in base_params.iter().enumerate() {
            let analytic = grads.dense(pvars[pi], p.shape());
            for i in (0..p.len()).step_by(3) {
                let mut plus = base_params.clone();
                plus[pi].data_mut()[i] += h;
                let mut minus = base_params.clone();
                minus[pi].data_mut()[i] -= h;
                let fd = (loss_with(&plus) - loss_with(&minus)) / (2.0 * h);
                let a = analytic.data()[i];
                let denom = fd.abs().max(a.abs()).max(1e-6);
                assert!(
                    (fd - a).abs() / denom < 1e-4 || (fd - a).abs() < 1e-8,
                    "param {pi} entry {i}: fd {fd:.9} vs analytic {a:.9}"
                );
                checked += 1;
            }
        }
        assert!(checked >= 50, "only {checked} parameters checked");
    }

    #[test]
    fn model_rejects_channel_mismatch() {
        let sig = Signature::new(2, 0, 0).unwrap();
        let layers = vec![
            LayerKind::QtLinear { c_in: 1, c_out: 2 },
            LayerKind::QtProduct { channels: 3 },
        ];
        assert!(Model::new(sig, 1, layers, 0).is_err());
        assert!(Model::new(
            sig,
            2,
            vec![LayerKind::QtLinear { c_in: 1, c_out: 2 }],
            0
        )
        .is_err());
    }

    #[test]
    fn break_layer_injects_grade_one_bias() {
        let sig = Signature::new(2, 0, 0).unwrap();
        let layers = vec![LayerKind::QtLinear { c_in: 1, c_out: 1 }];
        let mut model = Model::new(sig, 1, layers, 3).unwrap();
        let x = random_batch(sig, 2, 1, 20);
        let clean = model.forward(&x);
        model.break_layer = Some(0);
        let broken = model.forward(&x);
        let d = sig.dim();
        for (i, (a, b)) in clean.data().iter().zip(broken.data()).enumerate() {
            if i % d == 1 {
                assert!((b - a - 1.0).abs() < 1e-15);
            } else {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn named_checkpoint_round_trip() {
        let sig = Signature::new(3, 0, 0).unwrap();
        let layers = vec![
            LayerKind::QtLinear { c_in: 2, c_out: 2 },
            LayerKind::QtProduct { channels: 2 },
        ];
        let model = Model::new(sig, 2, layers.clone(), 8).unwrap();
        let named: Vec<(String, Tensor)> =
            model.named_params().into_iter().map(|(n, t)| (n, t.clone())).collect();
        assert_eq!(named[0].0, "0.phi");
        assert_eq!(named[1].0, "1.mix");
        assert_eq!(named[2].0, "1.phi");
        let mut other = Model::new(sig, 2, layers, 999).unwrap();
        assert!(tensor_rel_diff(&other.params()[0], &model.params()[0]) > 1e-3);
        other.load_named_params(&named).unwrap();
        for (a, b) in other.params().iter().zip(model.params()) {
            assert_eq!(a, b);
        }
        // missing tensor rejected
        assert!(other.load_named_params(&named[1..]).is_err());
    }
}
