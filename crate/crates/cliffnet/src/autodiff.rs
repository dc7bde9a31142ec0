//! Minimal reverse-mode differentiation over the tensor primitives the
//! layers need, plus a bias-corrected Adam optimizer.
//!
//! The tape owns every intermediate value; `Var` is an index into it.
//! Nodes are appended in evaluation order, so reverse append order is a
//! valid topological order for the backward sweep. Shapes are checked when
//! a node is recorded, never later.
//!
//! The primitive set is closed: elementwise add/affine/multiply/square/
//! sigmoid/clamped-reciprocal, fixed per-blade scaling (projections and
//! involutions are 0/±1 weight vectors), per-group parameter and batch
//! scaling, grouped channel mixing, the geometric-product bilinear with a
//! precomputed structure-constant table, dense 2-D matmul, group and full
//! reductions, blade slice extract/replace, and sign with a
//! straight-through gradient.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::algebra::Algebra;

/// Dense row-major float64 tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn filled(shape: &[usize], value: f64) -> Tensor {
        Tensor { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Tensor {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape does not match data length");
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor { shape: vec![1], data: vec![value] }
    }

    /// Entries drawn from Normal(0, std).
    pub fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
        let data = (0..shape.iter().product())
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Tensor { shape: shape.to_vec(), data }
    }

    /// Entries uniform in [lo, hi).
    pub fn rand_uniform<R: Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Tensor {
        let data = (0..shape.iter().product()).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// The single entry of a scalar tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a non-scalar tensor");
        self.data[0]
    }

    fn add_in_place(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "gradient shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Structure constants of the geometric product: entries (a, b, a xor b,
/// sign) for every pair of blades with a nonzero product.
#[derive(Debug)]
pub struct GpTable {
    entries: Vec<(u32, u32, u32, f64)>,
}

impl GpTable {
    pub fn new(alg: &Algebra) -> GpTable {
        let dim = alg.dim();
        let mut entries = Vec::new();
        for a in 0..dim {
            for b in 0..dim {
                let s = alg.blade_sign(a, b);
                if s != 0 {
                    entries.push((a as u32, b as u32, (a ^ b) as u32, s as f64));
                }
            }
        }
        GpTable { entries }
    }

    pub fn entries(&self) -> &[(u32, u32, u32, f64)] {
        &self.entries
    }
}

/// How the sign nonlinearity routes gradients past the rounding.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum SignMode {
    /// Forward sign(x); backward passes the gradient through unchanged
    /// wherever |x| <= 3, zero outside.
    Direct,
    /// Forward sign(2 sigmoid(x) - 1) (same values); backward differentiates
    /// the rescaled sigmoid surrogate.
    SigmoidRescale,
}

/// Index of a traced value on its tape.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Node {
    Leaf,
    Add { a: Var, b: Var },
    Affine { x: Var, mul: f64 },
    Mul { a: Var, b: Var },
    BladeScale { x: Var, weights: Arc<Vec<f64>> },
    GroupScaleParam { x: Var, p: Var, map: Arc<Vec<usize>> },
    GroupScaleBatch { x: Var, s: Var, map: Arc<Vec<usize>> },
    AddBiasGroup { x: Var, p: Var, map: Arc<Vec<usize>> },
    GroupedMatMul { x: Var, phi: Var, map: Arc<Vec<usize>> },
    GroupedBilinear { x: Var, y: Var, phi: Var, table: Arc<GpTable>, map: Arc<Vec<usize>> },
    MatMul { x: Var, w: Var },
    AddBias { x: Var, b: Var },
    Sigmoid { x: Var },
    RecipClamped { x: Var, eps: f64 },
    Square { x: Var },
    GroupReduce { x: Var, map: Arc<Vec<usize>> },
    Sum { x: Var },
    TakeBlade { x: Var, blade: usize },
    SetBlade { x: Var, v: Var, blade: usize },
    SignSt { x: Var, mode: SignMode },
}

/// Gradients keyed by tape variable.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of a leaf, densified to zeros if the variable never
    /// influenced the loss.
    pub fn dense(&self, v: Var, shape: &[usize]) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

/// Append-only record of primitive applications.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    values: Vec<Tensor>,
}

fn dims3(shape: &[usize]) -> (usize, usize, usize) {
    assert_eq!(shape.len(), 3, "expected a rank-3 tensor, got shape {shape:?}");
    (shape[0], shape[1], shape[2])
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    fn push(&mut self, node: Node, value: Tensor) -> Var {
        self.nodes.push(node);
        self.values.push(value);
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Node::Leaf, t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.values[a.0].shape, self.values[b.0].shape, "add shape mismatch");
        let data = self.values[a.0]
            .data
            .iter()
            .zip(&self.values[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor { shape: self.values[a.0].shape.clone(), data };
        self.push(Node::Add { a, b }, t)
    }

    /// Elementwise mul * x + add. The constants are not traced.
    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Var {
        let data = self.values[x.0].data.iter().map(|v| mul * v + add).collect();
        let t = Tensor { shape: self.values[x.0].shape.clone(), data };
        self.push(Node::Affine { x, mul }, t)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.affine(x, c, 0.0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.values[a.0].shape, self.values[b.0].shape, "mul shape mismatch");
        let data = self.values[a.0]
            .data
            .iter()
            .zip(&self.values[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor { shape: self.values[a.0].shape.clone(), data };
        self.push(Node::Mul { a, b }, t)
    }

    /// Multiply the last dimension by a fixed weight vector. Grade, parity,
    /// and quaternion-type projections are the 0/1 instances; involutions
    /// are the +-1 instances.
    pub fn blade_scale(&mut self, x: Var, weights: Arc<Vec<f64>>) -> Var {
        let shape = self.values[x.0].shape.clone();
        let d = *shape.last().expect("blade_scale on rank-0 tensor");
        assert_eq!(d, weights.len(), "weight vector does not match last dimension");
        let data = self.values[x.0]
            .data
            .chunks(d)
            .flat_map(|row| row.iter().zip(weights.iter()).map(|(v, w)| v * w))
            .collect();
        let t = Tensor { shape, data };
        self.push(Node::BladeScale { x, weights }, t)
    }

    /// out[t,l,d] = x[t,l,d] * p[l, map[d]] for x [B,L,D], p [L,G].
    pub fn group_scale_param(&mut self, x: Var, p: Var, map: Arc<Vec<usize>>) -> Var {
        let (bsz, l, d) = dims3(&self.values[x.0].shape);
        let ps = &self.values[p.0].shape;
        assert_eq!(map.len(), d, "group map does not match last dimension");
        let g = map.iter().max().map_or(0, |m| m + 1);
        assert!(ps.len() == 2 && ps[0] == l && ps[1] >= g, "param shape {ps:?} incompatible");
        let gn = ps[1];
        let xd = &self.values[x.0].data;
        let pd = &self.values[p.0].data;
        let mut data = vec![0.0; bsz * l * d];
        for t in 0..bsz {
            for li in 0..l {
                for di in 0..d {
                    data[(t * l + li) * d + di] = xd[(t * l + li) * d + di] * pd[li * gn + map[di]];
                }
            }
        }
        let t = Tensor { shape: vec![bsz, l, d], data };
        self.push(Node::GroupScaleParam { x, p, map }, t)
    }

    /// out[t,l,d] = x[t,l,d] * s[t,l,map[d]] for x [B,L,D], s [B,L,G].
    pub fn group_scale_batch(&mut self, x: Var, s: Var, map: Arc<Vec<usize>>) -> Var {
        let (bsz, l, d) = dims3(&self.values[x.0].shape);
        let (sb, sl, sg) = dims3(&self.values[s.0].shape);
        assert_eq!((sb, sl), (bsz, l), "scale tensor batch/channel mismatch");
        assert_eq!(map.len(), d, "group map does not match last dimension");
        assert!(map.iter().all(|&m| m < sg), "group index out of range");
        let xd = &self.values[x.0].data;
        let sd = &self.values[s.0].data;
        let mut data = vec![0.0; bsz * l * d];
        for t in 0..bsz {
            for li in 0..l {
                for di in 0..d {
                    data[(t * l + li) * d + di] =
                        xd[(t * l + li) * d + di] * sd[(t * l + li) * sg + map[di]];
                }
            }
        }
        let t = Tensor { shape: vec![bsz, l, d], data };
        self.push(Node::GroupScaleBatch { x, s, map }, t)
    }

    /// out[t,l,d] = x[t,l,d] + p[l, map[d]].
    pub fn add_bias_group(&mut self, x: Var, p: Var, map: Arc<Vec<usize>>) -> Var {
        let (bsz, l, d) = dims3(&self.values[x.0].shape);
        let ps = &self.values[p.0].shape;
        assert_eq!(map.len(), d, "group map does not match last dimension");
        assert!(ps.len() == 2 && ps[0] == l, "bias shape {ps:?} incompatible");
        let gn = ps[1];
        assert!(map.iter().all(|&m| m < gn), "group index out of range");
        let xd = &self.values[x.0].data;
        let pd = &self.values[p.0].data;
        let mut data = vec![0.0; bsz * l * d];
        for t in 0..bsz {
            for li in 0..l {
                for di in 0..d {
                    data[(t * l + li) * d + di] = xd[(t * l + li) * d + di] + pd[li * gn + map[di]];
                }
            }
        }
        let t = Tensor { shape: vec![bsz, l, d], data };
        self.push(Node::AddBiasGroup { x, p, map }, t)
    }

    /// Grouped channel mixing: out[t,lo,d] = sum_li phi[lo,li,map[d]] *
    /// x[t,li,d] for x [B,Li,D], phi [Lo,Li,G].
    pub fn grouped_matmul(&mut self, x: Var, phi: Var, map: Arc<Vec<usize>>) -> Var {
        let (bsz, li_n, d) = dims3(&self.values[x.0].shape);
        let (lo_n, li2, g) = dims3(&self.values[phi.0].shape);
        assert_eq!(li_n, li2, "channel mixing input count mismatch");
        assert_eq!(map.len(), d, "group map does not match last dimension");
        assert!(map.iter().all(|&m| m < g), "group index out of range");
        let xd = &self.values[x.0].data;
        let pd = &self.values[phi.0].data;
        let mut data = vec![0.0; bsz * lo_n * d];
        for t in 0..bsz {
            for lo in 0..lo_n {
                for di in 0..d {
                    let gi = map[di];
                    let mut acc = 0.0;
                    for li in 0..li_n {
                        acc += pd[(lo * li_n + li) * g + gi] * xd[(t * li_n + li) * d + di];
                    }
                    data[(t * lo_n + lo) * d + di] = acc;
                }
            }
        }
        let t = Tensor { shape: vec![bsz, lo_n, d], data };
        self.push(Node::GroupedMatMul { x, phi, map }, t)
    }

    /// Geometric-product bilinear with per-group coefficients:
    /// out[t,c,m] = sum over table entries (a,b,m,s) of
    /// phi[c, map[a], map[b], map[m]] * s * x[t,c,a] * y[t,c,b].
    pub fn grouped_bilinear(
        &mut self,
        x: Var,
        y: Var,
        phi: Var,
        table: Arc<GpTable>,
        map: Arc<Vec<usize>>,
    ) -> Var {
        let (bsz, l, d) = dims3(&self.values[x.0].shape);
        assert_eq!(self.values[x.0].shape, self.values[y.0].shape, "bilinear operand mismatch");
        let ps = &self.values[phi.0].shape;
        let g = map.iter().max().map_or(0, |m| m + 1);
        assert!(
            ps.len() == 4 && ps[0] == l && ps[1] >= g && ps[2] >= g && ps[3] >= g,
            "bilinear coefficient shape {ps:?} incompatible"
        );
        assert_eq!(map.len(), d, "group map does not match last dimension");
        let (g1, g2, g3) = (ps[1], ps[2], ps[3]);
        let xd = &self.values[x.0].data;
        let yd = &self.values[y.0].data;
        let pd = &self.values[phi.0].data;
        let mut data = vec![0.0; bsz * l * d];
        for t in 0..bsz {
            for c in 0..l {
                let base = (t * l + c) * d;
                let pbase = c * g1 * g2 * g3;
                for &(a, b, m, s) in table.entries() {
                    let (a, b, m) = (a as usize, b as usize, m as usize);
                    let coeff = pd[pbase + (map[a] * g2 + map[b]) * g3 + map[m]];
                    data[base + m] += coeff * s * xd[base + a] * yd[base + b];
                }
            }
        }
        let t = Tensor { shape: vec![bsz, l, d], data };
        self.push(Node::GroupedBilinear { x, y, phi, table, map }, t)
    }

    /// Dense 2-D product: out[t,o] = sum_i x[t,i] w[i,o].
    pub fn matmul(&mut self, x: Var, w: Var) -> Var {
        let xs = &self.values[x.0].shape;
        let ws = &self.values[w.0].shape;
        assert!(xs.len() == 2 && ws.len() == 2 && xs[1] == ws[0], "matmul {xs:?} x {ws:?}");
        let (bsz, i_n, o_n) = (xs[0], xs[1], ws[1]);
        let xd = &self.values[x.0].data;
        let wd = &self.values[w.0].data;
        let mut data = vec![0.0; bsz * o_n];
        for t in 0..bsz {
            for i in 0..i_n {
                let xv = xd[t * i_n + i];
                for o in 0..o_n {
                    data[t * o_n + o] += xv * wd[i * o_n + o];
                }
            }
        }
        let t = Tensor { shape: vec![bsz, o_n], data };
        self.push(Node::MatMul { x, w }, t)
    }

    /// out[t,o] = x[t,o] + b[o].
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let xs = &self.values[x.0].shape;
        let bs = &self.values[b.0].shape;
        assert!(xs.len() == 2 && bs.len() == 1 && xs[1] == bs[0], "bias {bs:?} against {xs:?}");
        let o_n = bs[0];
        let data = self.values[x.0]
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| v + self.values[b.0].data[i % o_n])
            .collect();
        let t = Tensor { shape: xs.clone(), data };
        self.push(Node::AddBias { x, b }, t)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let data = self.values[x.0].data.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
        let t = Tensor { shape: self.values[x.0].shape.clone(), data };
        self.push(Node::Sigmoid { x }, t)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let s = self.sigmoid(x);
        self.mul(x, s)
    }

    /// 1 / clamp(x), where |x| < eps is clamped to sign(x) * eps. Gradient
    /// is zero on the clamped set.
    pub fn recip_clamped(&mut self, x: Var, eps: f64) -> Var {
        assert!(eps > 0.0);
        let data = self.values[x.0]
            .data
            .iter()
            .map(|&v| {
                let c = if v.abs() < eps { eps.copysign(if v < 0.0 { -1.0 } else { 1.0 }) } else { v };
                1.0 / c
            })
            .collect();
        let t = Tensor { shape: self.values[x.0].shape.clone(), data };
        self.push(Node::RecipClamped { x, eps }, t)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let data = self.values[x.0].data.iter().map(|v| v * v).collect();
        let t = Tensor { shape: self.values[x.0].shape.clone(), data };
        self.push(Node::Square { x }, t)
    }

    /// out[t,l,g] = sum over d with map[d] = g of x[t,l,d]. Groups with no
    /// members reduce to zero, so `n_groups` may exceed max(map)+1.
    pub fn group_reduce(&mut self, x: Var, map: Arc<Vec<usize>>, n_groups: usize) -> Var {
        let (bsz, l, d) = dims3(&self.values[x.0].shape);
        assert_eq!(map.len(), d, "group map does not match last dimension");
        let g = n_groups;
        assert!(map.iter().all(|&m| m < g), "group index out of range");
        let xd = &self.values[x.0].data;
        let mut data = vec![0.0; bsz * l * g];
        for t in 0..bsz {
            for li in 0..l {
                for di in 0..d {
                    data[(t * l + li) * g + map[di]] += xd[(t * l + li) * d + di];
                }
            }
        }
        let t = Tensor { shape: vec![bsz, l, g], data };
        self.push(Node::GroupReduce { x, map }, t)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.values[x.0].data.iter().sum();
        self.push(Node::Sum { x }, Tensor::scalar(total))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.values[x.0].len();
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Slice out one blade coefficient: x [B,L,D] -> [B,L].
    pub fn take_blade(&mut self, x: Var, blade: usize) -> Var {
        let (bsz, l, d) = dims3(&self.values[x.0].shape);
        assert!(blade < d, "blade index out of range");
        let xd = &self.values[x.0].data;
        let data = (0..bsz * l).map(|i| xd[i * d + blade]).collect();
        let t = Tensor { shape: vec![bsz, l], data };
        self.push(Node::TakeBlade { x, blade }, t)
    }

    /// Replace one blade coefficient: out equals x except out[t,l,blade] =
    /// v[t,l].
    pub fn set_blade(&mut self, x: Var, v: Var, blade: usize) -> Var {
        let (bsz, l, d) = dims3(&self.values[x.0].shape);
        assert!(blade < d, "blade index out of range");
        assert_eq!(self.values[v.0].shape, vec![bsz, l], "replacement slice shape mismatch");
        let mut data = self.values[x.0].data.clone();
        for i in 0..bsz * l {
            data[i * d + blade] = self.values[v.0].data[i];
        }
        let t = Tensor { shape: vec![bsz, l, d], data };
        self.push(Node::SetBlade { x, v, blade }, t)
    }

    /// Elementwise sign with sign(0) = +1 and a straight-through gradient.
    pub fn sign_st(&mut self, x: Var, mode: SignMode) -> Var {
        let data = self.values[x.0]
            .data
            .iter()
            .map(|&v| if v < 0.0 { -1.0 } else { 1.0 })
            .collect();
        let t = Tensor { shape: self.values[x.0].shape.clone(), data };
        self.push(Node::SignSt { x, mode }, t)
    }

    /// Reverse sweep from a scalar loss. Visits each node once in reverse
    /// append order; returns per-variable gradients.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.values[loss.0].len(), 1, "loss must be a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(up) = grads[i].clone() else { continue };
            self.backprop_node(i, &up, &mut grads);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, i: usize, up: &Tensor, grads: &mut [Option<Tensor>]) {
        fn accum(grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
            match &mut grads[v.0] {
                Some(g) => g.add_in_place(&delta),
                slot => *slot = Some(delta),
            }
        }
        match &self.nodes[i] {
            Node::Leaf => {}
            Node::Add { a, b } => {
                accum(grads, *a, up.clone());
                accum(grads, *b, up.clone());
            }
            Node::Affine { x, mul } => {
                let data = up.data.iter().map(|g| mul * g).collect();
                accum(grads, *x, Tensor { shape: up.shape.clone(), data });
            }
            Node::Mul { a, b } => {
                let av = &self.values[a.0].data;
                let bv = &self.values[b.0].data;
                let da = up.data.iter().zip(bv).map(|(g, v)| g * v).collect();
                let db = up.data.iter().zip(av).map(|(g, v)| g * v).collect();
                accum(grads, *a, Tensor { shape: up.shape.clone(), data: da });
                accum(grads, *b, Tensor { shape: up.shape.clone(), data: db });
            }
            Node::BladeScale { x, weights } => {
                let d = weights.len();
                let data = up
                    .data
                    .chunks(d)
                    .flat_map(|row| row.iter().zip(weights.iter()).map(|(g, w)| g * w))
                    .collect();
                accum(grads, *x, Tensor { shape: up.shape.clone(), data });
            }
            Node::GroupScaleParam { x, p, map } => {
                let (bsz, l, d) = dims3(&self.values[x.0].shape);
                let gn = self.values[p.0].shape[1];
                let xd = &self.values[x.0].data;
                let pd = &self.values[p.0].data;
                let mut dx = vec![0.0; bsz * l * d];
                let mut dp = vec![0.0; l * gn];
                for t in 0..bsz {
                    for li in 0..l {
                        for di in 0..d {
                            let idx = (t * l + li) * d + di;
                            dx[idx] = up.data[idx] * pd[li * gn + map[di]];
                            dp[li * gn + map[di]] += up.data[idx] * xd[idx];
                        }
                    }
                }
                accum(grads, *x, Tensor { shape: vec![bsz, l, d], data: dx });
                accum(grads, *p, Tensor { shape: vec![l, gn], data: dp });
            }
            Node::GroupScaleBatch { x, s, map } => {
                let (bsz, l, d) = dims3(&self.values[x.0].shape);
                let sg = self.values[s.0].shape[2];
                let xd = &self.values[x.0].data;
                let sd = &self.values[s.0].data;
                let mut dx = vec![0.0; bsz * l * d];
                let mut ds = vec![0.0; bsz * l * sg];
                for t in 0..bsz {
                    for li in 0..l {
                        for di in 0..d {
                            let idx = (t * l + li) * d + di;
                            dx[idx] = up.data[idx] * sd[(t * l + li) * sg + map[di]];
                            ds[(t * l + li) * sg + map[di]] += up.data[idx] * xd[idx];
                        }
                    }
                }
                accum(grads, *x, Tensor { shape: vec![bsz, l, d], data: dx });
                accum(grads, *s, Tensor { shape: vec![bsz, l, sg], data: ds });
            }
            Node::AddBiasGroup { x, p, map } => {
                let (bsz, l, d) = dims3(&self.values[x.0].shape);
                let gn = self.values[p.0].shape[1];
                let mut dp = vec![0.0; l * gn];
                for t in 0..bsz {
                    for li in 0..l {
                        for di in 0..d {
                            dp[li * gn + map[di]] += up.data[(t * l + li) * d + di];
                        }
                    }
                }
                accum(grads, *x, up.clone());
                accum(grads, *p, Tensor { shape: vec![l, gn], data: dp });
            }
            Node::GroupedMatMul { x, phi, map } => {
                let (bsz, li_n, d) = dims3(&self.values[x.0].shape);
                let (lo_n, _, g) = dims3(&self.values[phi.0].shape);
                let xd = &self.values[x.0].data;
                let pd = &self.values[phi.0].data;
                let mut dx = vec![0.0; bsz * li_n * d];
                let mut dp = vec![0.0; lo_n * li_n * g];
                for t in 0..bsz {
                    for lo in 0..lo_n {
                        for di in 0..d {
                            let gi = map[di];
                            let g_up = up.data[(t * lo_n + lo) * d + di];
                            for li in 0..li_n {
                                dx[(t * li_n + li) * d + di] += g_up * pd[(lo * li_n + li) * g + gi];
                                dp[(lo * li_n + li) * g + gi] += g_up * xd[(t * li_n + li) * d + di];
                            }
                        }
                    }
                }
                accum(grads, *x, Tensor { shape: vec![bsz, li_n, d], data: dx });
                accum(grads, *phi, Tensor { shape: vec![lo_n, li_n, g], data: dp });
            }
            Node::GroupedBilinear { x, y, phi, table, map } => {
                let (bsz, l, d) = dims3(&self.values[x.0].shape);
                let ps = self.values[phi.0].shape.clone();
                let (g1, g2, g3) = (ps[1], ps[2], ps[3]);
                let xd = &self.values[x.0].data;
                let yd = &self.values[y.0].data;
                let pd = &self.values[phi.0].data;
                let mut dx = vec![0.0; bsz * l * d];
                let mut dy = vec![0.0; bsz * l * d];
                let mut dp = vec![0.0; l * g1 * g2 * g3];
                for t in 0..bsz {
                    for c in 0..l {
                        let base = (t * l + c) * d;
                        let pbase = c * g1 * g2 * g3;
                        for &(a, b, m, s) in table.entries() {
                            let (a, b, m) = (a as usize, b as usize, m as usize);
                            let pidx = pbase + (map[a] * g2 + map[b]) * g3 + map[m];
                            let g_up = up.data[base + m];
                            dx[base + a] += g_up * pd[pidx] * s * yd[base + b];
                            dy[base + b] += g_up * pd[pidx] * s * xd[base + a];
                            dp[pidx] += g_up * s * xd[base + a] * yd[base + b];
                        }
                    }
                }
                accum(grads, *x, Tensor { shape: vec![bsz, l, d], data: dx });
                accum(grads, *y, Tensor { shape: vec![bsz, l, d], data: dy });
                accum(grads, *phi, Tensor { shape: ps, data: dp });
            }
            Node::MatMul { x, w } => {
                let xs = &self.values[x.0].shape;
                let ws = &self.values[w.0].shape;
                let (bsz, i_n, o_n) = (xs[0], xs[1], ws[1]);
                let xd = &self.values[x.0].data;
                let wd = &self.values[w.0].data;
                let mut dx = vec![0.0; bsz * i_n];
                let mut dw = vec![0.0; i_n * o_n];
                for t in 0..bsz {
                    for i in 0..i_n {
                        for o in 0..o_n {
                            dx[t * i_n + i] += up.data[t * o_n + o] * wd[i * o_n + o];
                            dw[i * o_n + o] += xd[t * i_n + i] * up.data[t * o_n + o];
                        }
                    }
                }
                accum(grads, *x, Tensor { shape: vec![bsz, i_n], data: dx });
                accum(grads, *w, Tensor { shape: vec![i_n, o_n], data: dw });
            }
            Node::AddBias { x, b } => {
                let o_n = self.values[b.0].shape[0];
                let mut db = vec![0.0; o_n];
                for (i, g) in up.data.iter().enumerate() {
                    db[i % o_n] += g;
                }
                accum(grads, *x, up.clone());
                accum(grads, *b, Tensor { shape: vec![o_n], data: db });
            }
            Node::Sigmoid { x } => {
                let out = &self.values[i].data;
                let data = up.data.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)).collect();
                accum(grads, *x, Tensor { shape: up.shape.clone(), data });
            }
            Node::RecipClamped { x, eps } => {
                let xv = &self.values[x.0].data;
                let out = &self.values[i].data;
                let data = up
                    .data
                    .iter()
                    .zip(out.iter().zip(xv))
                    .map(|(g, (y, xi))| if xi.abs() < *eps { 0.0 } else { -g * y * y })
                    .collect();
                accum(grads, *x, Tensor { shape: up.shape.clone(), data });
            }
            Node::Square { x } => {
                let xv = &self.values[x.0].data;
                let data = up.data.iter().zip(xv).map(|(g, v)| 2.0 * g * v).collect();
                accum(grads, *x, Tensor { shape: up.shape.clone(), data });
            }
            Node::GroupReduce { x, map } => {
                let (bsz, l, d) = dims3(&self.values[x.0].shape);
                let g = up.shape[2];
                let mut dx = vec![0.0; bsz * l * d];
                for t in 0..bsz {
                    for li in 0..l {
                        for di in 0..d {
                            dx[(t * l + li) * d + di] = up.data[(t * l + li) * g + map[di]];
                        }
                    }
                }
                accum(grads, *x, Tensor { shape: vec![bsz, l, d], data: dx });
            }
            Node::Sum { x } => {
                let g = up.data[0];
                let shape = self.values[x.0].shape.clone();
                let data = vec![g; self.values[x.0].len()];
                accum(grads, *x, Tensor { shape, data });
            }
            Node::TakeBlade { x, blade } => {
                let (bsz, l, d) = dims3(&self.values[x.0].shape);
                let mut dx = vec![0.0; bsz * l * d];
                for i2 in 0..bsz * l {
                    dx[i2 * d + blade] = up.data[i2];
                }
                accum(grads, *x, Tensor { shape: vec![bsz, l, d], data: dx });
            }
            Node::SetBlade { x, v, blade } => {
                let (bsz, l, d) = dims3(&self.values[x.0].shape);
                let mut dx = up.data.clone();
                let mut dv = vec![0.0; bsz * l];
                for i2 in 0..bsz * l {
                    dv[i2] = dx[i2 * d + blade];
                    dx[i2 * d + blade] = 0.0;
                }
                accum(grads, *x, Tensor { shape: vec![bsz, l, d], data: dx });
                accum(grads, *v, Tensor { shape: vec![bsz, l], data: dv });
            }
            Node::SignSt { x, mode } => {
                let xv = &self.values[x.0].data;
                let data = match mode {
                    SignMode::Direct => up
                        .data
                        .iter()
                        .zip(xv)
                        .map(|(g, v)| if v.abs() <= 3.0 { *g } else { 0.0 })
                        .collect(),
                    SignMode::SigmoidRescale => up
                        .data
                        .iter()
                        .zip(xv)
                        .map(|(g, v)| {
                            let s = 1.0 / (1.0 + (-v).exp());
                            g * 2.0 * s * (1.0 - s)
                        })
                        .collect(),
                };
                accum(grads, *x, Tensor { shape: up.shape.clone(), data });
            }
        }
    }
}

/// Adam hyperparameters. `weight_decay` is decoupled: it shrinks the
/// parameter directly instead of entering the moment estimates.
#[derive(Copy, Clone, Debug)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamParams {
    fn default() -> AdamParams {
        AdamParams { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Bias-corrected Adam state over a fixed parameter list.
pub struct AdamState {
    hp: AdamParams,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    decay: Option<Vec<bool>>,
}

impl AdamState {
    pub fn new(hp: AdamParams, params: &[Tensor]) -> AdamState {
        AdamState {
            hp,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            decay: None,
        }
    }

    /// Restrict weight decay to the flagged tensors (biases and scale
    /// parameters are conventionally exempt). Absent mask decays everything.
    pub fn with_decay_mask(mut self, mask: Vec<bool>) -> AdamState {
        assert_eq!(mask.len(), self.m.len(), "decay mask must cover every parameter");
        self.decay = Some(mask);
        self
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Schedules adjust the rate between steps; moments are unaffected.
    pub fn set_lr(&mut self, lr: f64) {
        self.hp.lr = lr;
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed under the optimizer");
        assert_eq!(params.len(), grads.len(), "gradient count mismatch");
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.hp.beta1.powi(t);
        let bc2 = 1.0 - self.hp.beta2.powi(t);
        for (k, ((p, g), (m, v))) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
            .enumerate()
        {
            assert_eq!(p.shape(), g.shape(), "gradient shape mismatch");
            let wd = match &self.decay {
                Some(mask) if !mask[k] => 0.0,
                _ => self.hp.weight_decay,
            };
            for i in 0..p.len() {
                let gi = g.data()[i];
                m.data_mut()[i] = self.hp.beta1 * m.data()[i] + (1.0 - self.hp.beta1) * gi;
                v.data_mut()[i] = self.hp.beta2 * v.data()[i] + (1.0 - self.hp.beta2) * gi * gi;
                let m_hat = m.data()[i] / bc1;
                let v_hat = v.data()[i] / bc2;
                let decay = wd * p.data()[i];
                p.data_mut()[i] -= self.hp.lr * (m_hat / (v_hat.sqrt() + self.hp.eps) + decay);
            }
        }
    }

    /// Full optimizer state (step count, first and second moments), enough
    /// to continue a run as if it had never stopped.
    pub fn snapshot(&self) -> (u64, Vec<Tensor>, Vec<Tensor>) {
        (self.step, self.m.clone(), self.v.clone())
    }

    pub fn restore(hp: AdamParams, step: u64, m: Vec<Tensor>, v: Vec<Tensor>) -> AdamState {
        assert_eq!(m.len(), v.len(), "moment lists must pair up");
        AdamState { hp, step, m, v, decay: None }
    }
}
