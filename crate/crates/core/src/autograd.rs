//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to tracked [`Var`]s together
//! with a closure that maps the output gradient to input gradients.
//! [`Graph::backward`] replays the tape in reverse. Parameters live in a
//! [`ParamStore`] and are bound into a graph on first use, so the same model
//! definition serves training, inference and finite-difference checks.

use std::cell::RefCell;
use std::collections::{BTreeSet, HashMap};
use std::rc::Rc;
use std::sync::Arc;

use ndarray::{Axis, IxDyn, Slice};

use crate::kernels::{self, Conv2dGeom, Deconv2Geom};
use crate::tensor::{cast, contiguous, cst, from_vec, gemm, Element, Tensor};

/// Handle to a parameter tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Element> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Registers a parameter. Names are hierarchical (`encoder.stage0.block1.attn.qkv.weight`).
    ///
    /// Panics on a duplicate name, which always indicates a model-construction bug.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        let id = self.values.len();
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(contiguous(value));
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Same parameters, converted element-wise to another precision.
    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(cast).collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Overwrites a parameter value. Panics if the shape changes.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) {
        assert_eq!(self.values[id.0].shape(), value.shape(), "shape of {}", self.names[id.0]);
        self.values[id.0] = contiguous(value);
    }
}

/// A value flowing through a [`Graph`]. Cloning is cheap.
#[derive(Debug, Clone)]
pub struct Var<T: Element> {
    id: Option<usize>,
    value: Rc<Tensor<T>>,
}

impl<T: Element> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn is_tracked(&self) -> bool {
        self.id.is_some()
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        (*self.value).clone()
    }
}

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Element> {
    parents: Vec<Option<usize>>,
    backward: Option<BackwardFn<T>>,
}

/// Gradients produced by [`Graph::backward`], keyed by leaf.
pub struct Gradients<T: Element> {
    leaves: HashMap<usize, Tensor<T>>,
    params: HashMap<usize, usize>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of a tracked leaf created with [`Graph::input`].
    pub fn of(&self, v: &Var<T>) -> Option<&Tensor<T>> {
        v.id.and_then(|id| self.leaves.get(&id))
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id.0).and_then(|node| self.leaves.get(node))
    }

    /// One gradient slot per parameter in `store`; unused parameters get `None`.
    pub fn into_param_grads(mut self, store_len: usize) -> Vec<Option<Tensor<T>>> {
        (0..store_len)
            .map(|p| self.params.get(&p).and_then(|node| self.leaves.remove(node)))
            .collect()
    }
}

/// A recording of one forward pass.
pub struct Graph<'p, T: Element> {
    params: &'p ParamStore<T>,
    nodes: RefCell<Vec<Node<T>>>,
    bound: RefCell<HashMap<usize, Var<T>>>,
    track: bool,
}

fn reduce_to<T: Element>(grad: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if grad.shape() == shape {
        return grad.clone();
    }
    let mut g = grad.clone();
    for (ax, (&target, &have)) in shape.iter().zip(grad.shape()).enumerate() {
        if target == 1 && have != 1 {
            g = g.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    contiguous(g)
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    assert_eq!(a.len(), b.len(), "broadcast requires equal rank: {a:?} vs {b:?}");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            assert!(x == y || x == 1 || y == 1, "incompatible broadcast {a:?} vs {b:?}");
            x.max(y)
        })
        .collect()
}

fn inverse_perm(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Cyclic roll over axes 1 and 2 of a `[B, H, W, C]` tensor:
/// `out[b, i, j, c] = x[b, (i + dy) mod H, (j + dx) mod W, c]`.
pub fn roll_hw<T: Element>(x: &Tensor<T>, dy: isize, dx: isize) -> Tensor<T> {
    let s = x.shape();
    assert_eq!(s.len(), 4, "roll_hw expects [B, H, W, C]");
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let src = x.as_slice().expect("contiguous");
    let mut out = vec![T::zero(); src.len()];
    for bi in 0..b {
        for i in 0..h {
            let si = (i as isize + dy).rem_euclid(h as isize) as usize;
            for j in 0..w {
                let sj = (j as isize + dx).rem_euclid(w as isize) as usize;
                let d = ((bi * h + i) * w + j) * c;
                let o = ((bi * h + si) * w + sj) * c;
                out[d..d + c].copy_from_slice(&src[o..o + c]);
            }
        }
    }
    from_vec(s, out)
}

fn gelu_f64(x: f64) -> (f64, f64) {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    (x * cdf, cdf + x * pdf)
}

pub(crate) fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<'p, T: Element> Graph<'p, T> {
    /// A graph that records operations for backpropagation.
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            nodes: RefCell::new(Vec::new()),
            bound: RefCell::new(HashMap::new()),
            track: true,
        }
    }

    /// A graph that records nothing; intermediate values are freed as soon as they go out of scope.
    pub fn inference(params: &'p ParamStore<T>) -> Self {
        Self {
            track: false,
            ..Self::new(params)
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    fn push_leaf(&self) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            parents: Vec::new(),
            backward: None,
        });
        nodes.len() - 1
    }

    /// Binds a parameter into the graph (once; later calls return the same var).
    pub fn param(&self, id: ParamId) -> Var<T> {
        if let Some(v) = self.bound.borrow().get(&id.0) {
            return v.clone();
        }
        let value = Rc::new(self.params.get(id).clone());
        let node = self.track.then(|| self.push_leaf());
        let v = Var { id: node, value };
        self.bound.borrow_mut().insert(id.0, v.clone());
        v
    }

    /// A differentiable input leaf.
    pub fn input(&self, value: Tensor<T>) -> Var<T> {
        let node = self.track.then(|| self.push_leaf());
        Var {
            id: node,
            value: Rc::new(contiguous(value)),
        }
    }

    /// A value that never receives gradients.
    pub fn constant(&self, value: Tensor<T>) -> Var<T> {
        Var {
            id: None,
            value: Rc::new(contiguous(value)),
        }
    }

    /// Parameters that were bound during this pass.
    pub fn used_params(&self) -> BTreeSet<ParamId> {
        self.bound.borrow().keys().map(|&k| ParamId(k)).collect()
    }

    /// Records a custom operation. `backward` receives the output gradient and
    /// returns one optional gradient per entry of `parents`.
    pub fn custom(
        &self,
        value: Tensor<T>,
        parents: &[&Var<T>],
        backward: impl Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var<T> {
        let value = Rc::new(contiguous(value));
        if !self.track || parents.iter().all(|p| p.id.is_none()) {
            return Var { id: None, value };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            parents: parents.iter().map(|p| p.id).collect(),
            backward: Some(Box::new(backward)),
        });
        Var {
            id: Some(nodes.len() - 1),
            value,
        }
    }

    /// Backpropagates from `out`, seeding with ones.
    pub fn backward(&self, out: &Var<T>) -> Gradients<T> {
        let seed = Tensor::<T>::ones(IxDyn(out.shape()));
        self.backward_with(out, seed)
    }

    pub fn backward_with(&self, out: &Var<T>, seed: Tensor<T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        let mut leaves = HashMap::new();
        if let Some(root) = out.id {
            grads[root] = Some(seed);
            for i in (0..=root).rev() {
                let Some(g) = grads[i].take() else { continue };
                let node = &nodes[i];
                match &node.backward {
                    None => {
                        leaves.insert(i, g);
                    }
                    Some(f) => {
                        let parent_grads = f(&g);
                        debug_assert_eq!(parent_grads.len(), node.parents.len());
                        for (p, pg) in node.parents.iter().zip(parent_grads) {
                            let (Some(p), Some(pg)) = (p, pg) else { continue };
                            grads[*p] = Some(match grads[*p].take() {
                                Some(acc) => acc + &pg,
                                None => pg,
                            });
                        }
                    }
                }
            }
        }
        let params = self
            .bound
            .borrow()
            .iter()
            .filter_map(|(&p, v)| v.id.map(|n| (p, n)))
            .collect();
        Gradients { leaves, params }
    }

    // ----- elementwise -------------------------------------------------------

    /// Broadcasting addition; operands must share rank.
    pub fn add(&self, a: &Var<T>, b: &Var<T>) -> Var<T> {
        broadcast_shape(a.shape(), b.shape());
        let value = &*a.value + &*b.value;
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        self.custom(value, &[a, b], move |g| {
            vec![Some(reduce_to(g, &sa)), Some(reduce_to(g, &sb))]
        })
    }

    pub fn sub(&self, a: &Var<T>, b: &Var<T>) -> Var<T> {
        broadcast_shape(a.shape(), b.shape());
        let value = &*a.value - &*b.value;
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        self.custom(value, &[a, b], move |g| {
            vec![Some(reduce_to(g, &sa)), Some(reduce_to(&g.mapv(|v| -v), &sb))]
        })
    }

    /// Broadcasting multiplication; operands must share rank.
    pub fn mul(&self, a: &Var<T>, b: &Var<T>) -> Var<T> {
        broadcast_shape(a.shape(), b.shape());
        let value = &*a.value * &*b.value;
        let (av, bv) = (a.value.clone(), b.value.clone());
        self.custom(value, &[a, b], move |g| {
            let ga = g * &*bv;
            let gb = g * &*av;
            vec![Some(reduce_to(&ga, av.shape())), Some(reduce_to(&gb, bv.shape()))]
        })
    }

    pub fn scale(&self, a: &Var<T>, c: T) -> Var<T> {
        let value = a.value.mapv(|v| v * c);
        self.custom(value, &[a], move |g| vec![Some(g.mapv(|v| v * c))])
    }

    fn unary(&self, a: &Var<T>, f: impl Fn(T) -> (T, T)) -> Var<T> {
        let pairs: Vec<(T, T)> = a.value.iter().map(|&v| f(v)).collect();
        let value = from_vec(a.shape(), pairs.iter().map(|p| p.0).collect());
        let deriv = from_vec(a.shape(), pairs.into_iter().map(|p| p.1).collect());
        self.custom(value, &[a], move |g| vec![Some(g * &deriv)])
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&self, a: &Var<T>) -> Var<T> {
        self.unary(a, |v| {
            let (y, d) = gelu_f64(v.to_f64());
            (cst(y), cst(d))
        })
    }

    pub fn leaky_relu(&self, a: &Var<T>, slope: f64) -> Var<T> {
        let s: T = cst(slope);
        self.unary(a, move |v| if v >= T::zero() { (v, T::one()) } else { (v * s, s) })
    }

    pub fn sigmoid(&self, a: &Var<T>) -> Var<T> {
        self.unary(a, |v| {
            let y = sigmoid(v);
            (y, y * (T::one() - y))
        })
    }

    // ----- shape -------------------------------------------------------------

    pub fn reshape(&self, a: &Var<T>, shape: &[usize]) -> Var<T> {
        let value = (*a.value)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .unwrap_or_else(|e| panic!("reshape {:?} -> {shape:?}: {e}", a.shape()));
        let orig = a.shape().to_vec();
        self.custom(value, &[a], move |g| {
            vec![Some(g.clone().into_shape_with_order(IxDyn(&orig)).expect("reshape back"))]
        })
    }

    pub fn permute(&self, a: &Var<T>, axes: &[usize]) -> Var<T> {
        let value = contiguous((*a.value).clone().permuted_axes(IxDyn(axes)));
        let inv = inverse_perm(axes);
        self.custom(value, &[a], move |g| {
            vec![Some(contiguous(g.clone().permuted_axes(IxDyn(&inv))))]
        })
    }

    /// Cyclic shift of a `[B, H, W, C]` grid, see [`roll_hw`].
    pub fn roll_hw(&self, a: &Var<T>, dy: isize, dx: isize) -> Var<T> {
        let value = roll_hw(&a.value, dy, dx);
        self.custom(value, &[a], move |g| vec![Some(roll_hw(g, -dy, -dx))])
    }

    pub fn concat(&self, parts: &[&Var<T>], axis: usize) -> Var<T> {
        let views: Vec<_> = parts.iter().map(|p| p.value.view()).collect();
        let value = ndarray::concatenate(Axis(axis), &views).expect("concat shapes");
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        self.custom(value, parts, move |g| {
            let mut start = 0;
            sizes
                .iter()
                .map(|&n| {
                    let piece = g.slice_axis(Axis(axis), Slice::from(start..start + n)).to_owned();
                    start += n;
                    Some(contiguous(piece))
                })
                .collect()
        })
    }

    /// Sub-range `start..end` along `axis`.
    pub fn narrow(&self, a: &Var<T>, axis: usize, start: usize, end: usize) -> Var<T> {
        let value = contiguous(a.value.slice_axis(Axis(axis), Slice::from(start..end)).to_owned());
        let shape = a.shape().to_vec();
        self.custom(value, &[a], move |g| {
            let mut full = Tensor::zeros(IxDyn(&shape));
            full.slice_axis_mut(Axis(axis), Slice::from(start..end)).assign(g);
            vec![Some(full)]
        })
    }

    // ----- reductions --------------------------------------------------------

    pub fn sum_all(&self, a: &Var<T>) -> Var<T> {
        let value = ndarray::arr0(a.value.sum()).into_dyn();
        let shape = a.shape().to_vec();
        self.custom(value, &[a], move |g| {
            let gv = g.iter().next().copied().unwrap_or_else(T::zero);
            vec![Some(Tensor::from_elem(IxDyn(&shape), gv))]
        })
    }

    pub fn mean_all(&self, a: &Var<T>) -> Var<T> {
        let n = a.value.len().max(1);
        let s = self.sum_all(a);
        self.scale(&s, T::one() / cst(n as f64))
    }

    /// Spatial mean of `[B, C, H, W]` to `[B, C, 1, 1]`.
    pub fn mean_hw(&self, a: &Var<T>) -> Var<T> {
        let s = a.shape();
        assert_eq!(s.len(), 4, "mean_hw expects NCHW");
        let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
        let inv = T::one() / cst(hw as f64);
        let src = a.value.as_slice().expect("contiguous");
        let means: Vec<T> = src.chunks(hw).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        let shape = s.to_vec();
        self.custom(from_vec(&[b, c, 1, 1], means), &[a], move |g| {
            let gs = g.as_slice().expect("contiguous");
            let mut out = Vec::with_capacity(gs.len() * hw);
            for &gv in gs {
                out.extend(std::iter::repeat_n(gv * inv, hw));
            }
            vec![Some(from_vec(&shape, out))]
        })
    }

    // ----- linear algebra ----------------------------------------------------

    /// `x[..., K] · w[K, N] -> [..., N]`.
    pub fn matmul(&self, x: &Var<T>, w: &Var<T>) -> Var<T> {
        let xs = x.shape();
        let ws = w.shape();
        assert_eq!(ws.len(), 2, "matmul rhs must be 2-D");
        let k = *xs.last().expect("matmul lhs rank >= 1");
        assert_eq!(k, ws[0], "matmul inner dims {xs:?} x {ws:?}");
        let n = ws[1];
        let rows = x.value.len() / k.max(1);
        let mut out = vec![T::zero(); rows * n];
        gemm(rows, k, n, x.value.as_slice().unwrap(), false, w.value.as_slice().unwrap(), false, &mut out, false);
        let mut oshape = xs.to_vec();
        *oshape.last_mut().unwrap() = n;
        let (xv, wv) = (x.value.clone(), w.value.clone());
        let (track_x, track_w) = (x.is_tracked(), w.is_tracked());
        self.custom(from_vec(&oshape, out), &[x, w], move |g| {
            let gs = g.as_slice().unwrap();
            let dx = track_x.then(|| {
                let mut dx = vec![T::zero(); rows * k];
                gemm(rows, n, k, gs, false, wv.as_slice().unwrap(), true, &mut dx, false);
                from_vec(xv.shape(), dx)
            });
            let dw = track_w.then(|| {
                let mut dw = vec![T::zero(); k * n];
                gemm(k, rows, n, xv.as_slice().unwrap(), true, gs, false, &mut dw, false);
                from_vec(wv.shape(), dw)
            });
            vec![dx, dw]
        })
    }

    /// Batched product of `[n, p, q]` and `[n, q, r]` (or `[n, r, q]` when `trans_b`).
    pub fn bmm(&self, a: &Var<T>, b: &Var<T>, trans_b: bool) -> Var<T> {
        let (sa, sb) = (a.shape(), b.shape());
        assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0], "bmm shapes {sa:?} {sb:?}");
        let (n, p, q) = (sa[0], sa[1], sa[2]);
        let r = if trans_b { sb[1] } else { sb[2] };
        assert_eq!(q, if trans_b { sb[2] } else { sb[1] }, "bmm inner dims {sa:?} {sb:?}");
        let av = a.value.clone();
        let bv = b.value.clone();
        let (asl, bsl) = (av.as_slice().unwrap(), bv.as_slice().unwrap());
        let mut out = vec![T::zero(); n * p * r];
        for i in 0..n {
            gemm(
                p,
                q,
                r,
                &asl[i * p * q..(i + 1) * p * q],
                false,
                &bsl[i * q * r..(i + 1) * q * r],
                trans_b,
                &mut out[i * p * r..(i + 1) * p * r],
                false,
            );
        }
        let (track_a, track_b) = (a.is_tracked(), b.is_tracked());
        self.custom(from_vec(&[n, p, r], out), &[a, b], move |g| {
            let gs = g.as_slice().unwrap();
            let (asl, bsl) = (av.as_slice().unwrap(), bv.as_slice().unwrap());
            let da = track_a.then(|| {
                let mut da = vec![T::zero(); n * p * q];
                for i in 0..n {
                    // da = g · bᵀ  (b stored [q, r]) or g · b (b stored [r, q])
                    gemm(
                        p,
                        r,
                        q,
                        &gs[i * p * r..(i + 1) * p * r],
                        false,
                        &bsl[i * q * r..(i + 1) * q * r],
                        !trans_b,
                        &mut da[i * p * q..(i + 1) * p * q],
                        false,
                    );
                }
                from_vec(&[n, p, q], da)
            });
            let db = track_b.then(|| {
                let mut db = vec![T::zero(); n * q * r];
                for i in 0..n {
                    let (ga, aa) = (&gs[i * p * r..(i + 1) * p * r], &asl[i * p * q..(i + 1) * p * q]);
                    let dst = &mut db[i * q * r..(i + 1) * q * r];
                    if trans_b {
                        gemm(r, p, q, ga, true, aa, false, dst, false);
                    } else {
                        gemm(q, p, r, aa, true, ga, false, dst, false);
                    }
                }
                from_vec(bv.shape(), db)
            });
            vec![da, db]
        })
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self, a: &Var<T>) -> Var<T> {
        let d = *a.shape().last().expect("softmax rank >= 1");
        let src = a.value.as_slice().unwrap();
        let mut out = vec![T::zero(); src.len()];
        for (row, dst) in src.chunks(d).zip(out.chunks_mut(d)) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for (o, &v) in dst.iter_mut().zip(row) {
                *o = (v - mx).exp();
                sum = sum + *o;
            }
            dst.iter_mut().for_each(|o| *o = *o / sum);
        }
        let y = Rc::new(from_vec(a.shape(), out));
        let yc = y.clone();
        self.custom((*y).clone(), &[a], move |g| {
            let ys = yc.as_slice().unwrap();
            let gs = g.as_slice().unwrap();
            let mut dx = vec![T::zero(); ys.len()];
            for ((yr, gr), dr) in ys.chunks(d).zip(gs.chunks(d)).zip(dx.chunks_mut(d)) {
                let dot: T = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum();
                for ((o, &y), &g) in dr.iter_mut().zip(yr).zip(gr) {
                    *o = y * (g - dot);
                }
            }
            vec![Some(from_vec(yc.shape(), dx))]
        })
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta` of length D.
    pub fn layer_norm(&self, x: &Var<T>, gamma: &Var<T>, beta: &Var<T>, eps: f64) -> Var<T> {
        let d = *x.shape().last().expect("layer_norm rank >= 1");
        assert_eq!(gamma.shape(), &[d]);
        assert_eq!(beta.shape(), &[d]);
        let eps: T = cst(eps);
        let src = x.value.as_slice().unwrap();
        let gs = gamma.value.as_slice().unwrap();
        let bs = beta.value.as_slice().unwrap();
        let rows = src.len() / d;
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        let inv_d = T::one() / cst(d as f64);
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let xh = (row[c] - mean) * rs;
                xhat[r * d + c] = xh;
                out[r * d + c] = xh * gs[c] + bs[c];
            }
        }
        let gamma_v = gamma.value.clone();
        let shape = x.shape().to_vec();
        self.custom(from_vec(&shape, out), &[x, gamma, beta], move |g| {
            let go = g.as_slice().unwrap();
            let gs = gamma_v.as_slice().unwrap();
            let mut dx = vec![T::zero(); go.len()];
            let mut dgamma = vec![T::zero(); d];
            let mut dbeta = vec![T::zero(); d];
            for r in 0..rows {
                let mut mean_dxh = T::zero();
                let mut mean_dxh_xh = T::zero();
                for c in 0..d {
                    let i = r * d + c;
                    dgamma[c] = dgamma[c] + go[i] * xhat[i];
                    dbeta[c] = dbeta[c] + go[i];
                    let dxh = go[i] * gs[c];
                    mean_dxh = mean_dxh + dxh;
                    mean_dxh_xh = mean_dxh_xh + dxh * xhat[i];
                }
                mean_dxh = mean_dxh * inv_d;
                mean_dxh_xh = mean_dxh_xh * inv_d;
                for c in 0..d {
                    let i = r * d + c;
                    dx[i] = rstd[r] * (go[i] * gs[c] - mean_dxh - xhat[i] * mean_dxh_xh);
                }
            }
            vec![
                Some(from_vec(&shape, dx)),
                Some(from_vec(&[d], dgamma)),
                Some(from_vec(&[d], dbeta)),
            ]
        })
    }

    /// Gathers a relative-position bias: `out[h, i, j] = table[index[i*n + j], h]`.
    pub fn gather_bias(&self, table: &Var<T>, index: Arc<Vec<usize>>, n: usize) -> Var<T> {
        let ts = table.shape();
        assert_eq!(ts.len(), 2);
        assert_eq!(index.len(), n * n);
        let (entries, heads) = (ts[0], ts[1]);
        let tv = table.value.as_slice().unwrap();
        let mut out = vec![T::zero(); heads * n * n];
        for h in 0..heads {
            for (ij, &e) in index.iter().enumerate() {
                out[h * n * n + ij] = tv[e * heads + h];
            }
        }
        self.custom(from_vec(&[heads, n, n], out), &[table], move |g| {
            let gs = g.as_slice().unwrap();
            let mut dt = vec![T::zero(); entries * heads];
            for h in 0..heads {
                for (ij, &e) in index.iter().enumerate() {
                    dt[e * heads + h] = dt[e * heads + h] + gs[h * n * n + ij];
                }
            }
            vec![Some(from_vec(&[entries, heads], dt))]
        })
    }

    // ----- convolutions ------------------------------------------------------

    /// 2-D convolution on NCHW input with weight `[Cout, Cin/groups, kh, kw]`.
    /// Only `groups == 1` and depth-wise (`groups == Cin == Cout`) are supported.
    pub fn conv2d(
        &self,
        x: &Var<T>,
        w: &Var<T>,
        bias: Option<&Var<T>>,
        stride: usize,
        pad: usize,
        dilation: usize,
        groups: usize,
    ) -> Var<T> {
        let xs = x.shape();
        let ws = w.shape();
        assert_eq!(xs.len(), 4, "conv2d expects NCHW");
        assert_eq!(ws.len(), 4, "conv2d weight rank");
        assert_eq!(xs[1], ws[1] * groups, "conv2d channel mismatch {xs:?} vs {ws:?}");
        let geom = Conv2dGeom {
            batch: xs[0],
            in_ch: xs[1],
            out_ch: ws[0],
            height: xs[2],
            width: xs[3],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad,
            dilation,
            groups,
        };
        let (ho, wo) = geom.out_hw();
        let out = kernels::conv2d_forward(
            &geom,
            x.value.as_slice().unwrap(),
            w.value.as_slice().unwrap(),
            bias.map(|b| b.value.as_slice().unwrap()),
        );
        let (xv, wv) = (x.value.clone(), w.value.clone());
        let mut parents = vec![x, w];
        if let Some(b) = bias {
            parents.push(b);
        }
        let has_bias = bias.is_some();
        self.custom(from_vec(&[geom.batch, geom.out_ch, ho, wo], out), &parents, move |g| {
            let grads = kernels::conv2d_backward(&geom, xv.as_slice().unwrap(), wv.as_slice().unwrap(), g.as_slice().unwrap());
            let mut res = vec![
                Some(from_vec(xv.shape(), grads.dx)),
                Some(from_vec(wv.shape(), grads.dw)),
            ];
            if has_bias {
                res.push(Some(from_vec(&[geom.out_ch], grads.db)));
            }
            res
        })
    }

    /// Kernel-2, stride-2 transposed convolution; weight `[Cin, Cout, 2, 2]`.
    pub fn conv_transpose2x2(&self, x: &Var<T>, w: &Var<T>, bias: Option<&Var<T>>) -> Var<T> {
        let xs = x.shape();
        let ws = w.shape();
        assert_eq!(xs.len(), 4, "deconv expects NCHW");
        assert_eq!(ws, &[xs[1], ws[1], 2, 2], "deconv weight shape");
        let geom = Deconv2Geom {
            batch: xs[0],
            in_ch: xs[1],
            out_ch: ws[1],
            height: xs[2],
            width: xs[3],
        };
        let out = kernels::deconv2_forward(
            &geom,
            x.value.as_slice().unwrap(),
            w.value.as_slice().unwrap(),
            bias.map(|b| b.value.as_slice().unwrap()),
        );
        let (xv, wv) = (x.value.clone(), w.value.clone());
        let mut parents = vec![x, w];
        if let Some(b) = bias {
            parents.push(b);
        }
        let has_bias = bias.is_some();
        let oshape = [geom.batch, geom.out_ch, 2 * geom.height, 2 * geom.width];
        self.custom(from_vec(&oshape, out), &parents, move |g| {
            let grads = kernels::deconv2_backward(&geom, xv.as_slice().unwrap(), wv.as_slice().unwrap(), g.as_slice().unwrap());
            let mut res = vec![
                Some(from_vec(xv.shape(), grads.dx)),
                Some(from_vec(wv.shape(), grads.dw)),
            ];
            if has_bias {
                res.push(Some(from_vec(&[geom.out_ch], grads.db)));
            }
            res
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, rand_tensor, weighted_sum, GradCheckOptions};

    #[test]
    fn roll_matches_definition() {
        let x = from_vec(&[1, 4, 1, 1], vec![1.0f64, 2.0, 3.0, 4.0]);
        let r = roll_hw(&x, 1, 0);
        assert_eq!(r.as_slice().unwrap(), &[2.0, 3.0, 4.0, 1.0]);
        assert_eq!(roll_hw(&r, -1, 0), x);
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        let store = ParamStore::<f64>::new();
        let a = rand_tensor(&[2, 3, 4], 1);
        let b = rand_tensor(&[2, 4, 3], 2);
        let gamma = rand_tensor(&[4], 3);
        let beta = rand_tensor(&[4], 4);
        let w = rand_tensor(&[4, 5], 5);
        let f = |g: &Graph<f64>, vs: &[Var<f64>]| {
            let ln = g.layer_norm(&vs[0], &vs[2], &vs[3], 1e-5);
            let sm = g.softmax_last(&g.bmm(&ln, &vs[1], false));
            let mm = g.matmul(&g.gelu(&vs[0]), &vs[4]);
            let t = g.bmm(&sm, &g.sigmoid(&g.leaky_relu(&mm, 0.1)), false);
            let sq = g.mul(&t, &t);
            weighted_sum(g, &sq, 9)
        };
        let opts = GradCheckOptions { max_probes_per_tensor: None, ..Default::default() };
        let r = check_gradients(&store, &[], &[a, b, gamma, beta, w], f, opts);
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let store = ParamStore::<f64>::new();
        let x = rand_tensor(&[2, 3, 5, 5], 11);
        let w = rand_tensor(&[3, 1, 3, 3], 12);
        let w2 = rand_tensor(&[2, 3, 3, 3], 13);
        let b2 = rand_tensor(&[2], 14);
        let wt = rand_tensor(&[2, 3, 2, 2], 15);
        let f = |g: &Graph<f64>, vs: &[Var<f64>]| {
            let dw = g.conv2d(&vs[0], &vs[1], None, 1, 1, 1, 3);
            let dense = g.conv2d(&dw, &vs[2], Some(&vs[3]), 1, 2, 2, 1);
            let up = g.conv_transpose2x2(&dense, &vs[4], None);
            let pooled = g.mean_hw(&up);
            let y = g.mul(&g.add(&up, &pooled), &up);
            let rolled = g.roll_hw(&g.permute(&y, &[0, 2, 3, 1]), -1, 2);
            let cat = g.concat(&[&rolled, &g.scale(&rolled, 0.5)], 3);
            weighted_sum(g, &cat, 21)
        };
        let opts = GradCheckOptions { max_probes_per_tensor: None, ..Default::default() };
        let r = check_gradients(&store, &[], &[x, w, w2, b2, wt], f, opts);
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn inference_graph_records_nothing() {
        let mut store = ParamStore::<f64>::new();
        let p = store.add("p", rand_tensor(&[3], 1));
        let g = Graph::inference(&store);
        let v = g.param(p);
        let y = g.sum_all(&g.mul(&v, &v));
        assert!(!y.is_tracked());
        assert!(g.nodes.borrow().is_empty());
        assert_eq!(g.used_params().len(), 1);
    }
}
