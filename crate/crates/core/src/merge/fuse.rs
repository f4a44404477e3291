//! Closed-form fusion of adjacent linear operators.
//!
//! Every rule takes eval-mode parameters and returns a single operator whose
//! output equals the composition. Convolutions are affine maps of the padded
//! input, so sequential composition stays exact except where a later conv
//! zero-pads an intermediate that carries a bias (see
//! [`fuse_conv1x1_convkxk`]).

use updp_tensor::kernels::{conv2d, conv_out_extent, linear};
use updp_tensor::{Conv2dGeom, Element, ParamStore, Tensor};

use crate::error::{Error, Result};
use crate::graph::{ConvSpec, LayerNode};

/// A convolution with an explicit bias.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedConv<T> {
    /// `[cout, cin / groups, kh, kw]`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: [usize; 2],
    pub padding: [usize; 2],
    pub groups: usize,
}

impl<T: Element> FusedConv<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>, stride: [usize; 2], padding: [usize; 2], groups: usize) -> Result<Self> {
        if weight.rank() != 4 || groups == 0 || weight.dim(0) % groups != 0 || bias.shape() != [weight.dim(0)] {
            return Err(Error::merge(
                "conv",
                format!("weight {:?} / bias {:?} / groups {groups} do not form a conv", weight.shape(), bias.shape()),
            ));
        }
        Ok(FusedConv {
            weight,
            bias,
            stride,
            padding,
            groups,
        })
    }

    /// Reads a conv node's parameters; a missing bias becomes zeros.
    pub fn from_node(node: &LayerNode, params: &ParamStore<T>) -> Result<Self> {
        let c = node
            .conv()
            .ok_or_else(|| Error::merge(&node.name, format!("expected a conv, found {}", node.kind.tag())))?;
        let weight = params.value(&node.param("weight"))?.clone();
        let bias = if c.bias {
            params.value(&node.param("bias"))?.clone()
        } else {
            Tensor::zeros(vec![c.cout])
        };
        FusedConv::new(weight, bias, c.stride, c.padding, c.groups)
    }

    pub fn cout(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn cin(&self) -> usize {
        self.weight.dim(1) * self.groups
    }

    pub fn kernel(&self) -> [usize; 2] {
        [self.weight.dim(2), self.weight.dim(3)]
    }

    pub fn is_pointwise(&self) -> bool {
        self.kernel() == [1, 1]
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups > 1 && self.groups == self.cin() && self.cin() == self.cout()
    }

    pub fn geom(&self) -> Conv2dGeom {
        Conv2dGeom {
            stride: self.stride,
            padding: self.padding,
            groups: self.groups,
        }
    }

    pub fn spec(&self) -> ConvSpec {
        ConvSpec {
            cin: self.cin(),
            cout: self.cout(),
            kernel: self.kernel(),
            stride: self.stride,
            padding: self.padding,
            groups: self.groups,
            bias: true,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(conv2d(x, &self.weight, Some(&self.bias), &self.geom())?)
    }

    /// Output spatial extent for an `[h, w]` input.
    pub fn out_hw(&self, hw: [usize; 2]) -> Option<[usize; 2]> {
        let k = self.kernel();
        Some([
            conv_out_extent(hw[0], k[0], self.stride[0], self.padding[0])?,
            conv_out_extent(hw[1], k[1], self.stride[1], self.padding[1])?,
        ])
    }

    /// The equivalent ungrouped conv (block-diagonal weight).
    pub fn densify(&self) -> Self {
        if self.groups == 1 {
            return self.clone();
        }
        let (cout, cin) = (self.cout(), self.cin());
        let [kh, kw] = self.kernel();
        let (ipg, opg) = (cin / self.groups, cout / self.groups);
        let mut w = vec![T::zero(); cout * cin * kh * kw];
        let src = self.weight.data();
        for o in 0..cout {
            let g = o / opg;
            for i in 0..ipg {
                let from = (o * ipg + i) * kh * kw;
                let to = (o * cin + g * ipg + i) * kh * kw;
                w[to..to + kh * kw].copy_from_slice(&src[from..from + kh * kw]);
            }
        }
        FusedConv {
            weight: Tensor::new(vec![cout, cin, kh, kw], w).expect("sized"),
            bias: self.bias.clone(),
            stride: self.stride,
            padding: self.padding,
            groups: 1,
        }
    }

    /// `y ↦ s ⊙ y + t` applied per output channel.
    pub fn scale_output(&self, s: &[T], t: &[T]) -> Result<Self> {
        let cout = self.cout();
        if s.len() != cout || t.len() != cout {
            return Err(Error::merge("conv", format!("{} scale factors for {cout} channels", s.len())));
        }
        let per = self.weight.numel() / cout;
        let mut w = self.weight.clone();
        for (o, row) in w.data_mut().chunks_mut(per).enumerate() {
            for v in row {
                *v *= s[o];
            }
        }
        let b = Tensor::new(vec![cout], (0..cout).map(|o| s[o] * self.bias.data()[o] + t[o]).collect())?;
        Ok(FusedConv { weight: w, bias: b, ..self.clone() })
    }
}

/// Eval-mode batch-norm parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct BnState<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
    pub eps: f64,
}

impl<T: Element> BnState<T> {
    pub fn from_node(node: &LayerNode, params: &ParamStore<T>) -> Result<Self> {
        let crate::graph::LayerKind::BatchNorm { eps, .. } = node.kind else {
            return Err(Error::merge(&node.name, format!("expected a batch norm, found {}", node.kind.tag())));
        };
        let get = |s: &str| -> Result<Tensor<T>> { Ok(params.value(&node.param(s))?.clone()) };
        Ok(BnState {
            gamma: get("weight")?,
            beta: get("bias")?,
            mean: get("running_mean")?,
            var: get("running_var")?,
            eps,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    /// Per-channel `(s, t)` with `bn(x) = s ⊙ x + t`.
    pub fn affine(&self) -> (Vec<T>, Vec<T>) {
        let eps = T::from_f64(self.eps);
        let s: Vec<T> = self
            .gamma
            .data()
            .iter()
            .zip(self.var.data())
            .map(|(&g, &v)| g / (v + eps).sqrt())
            .collect();
        let t = s
            .iter()
            .zip(self.beta.data().iter().zip(self.mean.data()))
            .map(|(&s, (&b, &m))| b - s * m)
            .collect();
        (s, t)
    }
}

/// `bn(conv(x))` as one conv.
pub fn fuse_conv_bn<T: Element>(conv: &FusedConv<T>, bn: &BnState<T>) -> Result<FusedConv<T>> {
    if bn.channels() != conv.cout() {
        return Err(Error::merge(
            "batchnorm",
            format!("{} channels after a conv with {} outputs", bn.channels(), conv.cout()),
        ));
    }
    let (s, t) = bn.affine();
    conv.scale_output(&s, &t)
}

/// A fully connected layer `y = W x + b` with `W: [out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedLinear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Element> FusedLinear<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        if weight.rank() != 2 || bias.shape() != [weight.dim(0)] {
            return Err(Error::merge(
                "linear",
                format!("weight {:?} / bias {:?} do not form a linear layer", weight.shape(), bias.shape()),
            ));
        }
        Ok(FusedLinear { weight, bias })
    }

    pub fn from_node(node: &LayerNode, params: &ParamStore<T>) -> Result<Self> {
        let crate::graph::LayerKind::Linear { cout, bias, .. } = node.kind else {
            return Err(Error::merge(&node.name, format!("expected a linear layer, found {}", node.kind.tag())));
        };
        let weight = params.value(&node.param("weight"))?.clone();
        let b = if bias {
            params.value(&node.param("bias"))?.clone()
        } else {
            Tensor::zeros(vec![cout])
        };
        FusedLinear::new(weight, b)
    }

    pub fn identity(n: usize) -> Self {
        FusedLinear {
            weight: Tensor::from_fn(vec![n, n], |i| if i / n == i % n { T::one() } else { T::zero() }),
            bias: Tensor::zeros(vec![n]),
        }
    }

    pub fn cin(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn cout(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(linear(x, &self.weight, Some(&self.bias))?)
    }

    /// `y ↦ s ⊙ y + t` applied per output feature.
    pub fn scale_output(&self, s: &[T], t: &[T]) -> Result<Self> {
        let (m, n) = (self.cout(), self.cin());
        if s.len() != m || t.len() != m {
            return Err(Error::merge("linear", format!("{} scale factors for {m} outputs", s.len())));
        }
        let mut w = self.weight.clone();
        for (o, row) in w.data_mut().chunks_mut(n).enumerate() {
            for v in row {
                *v *= s[o];
            }
        }
        let b = (0..m).map(|o| s[o] * self.bias.data()[o] + t[o]).collect();
        FusedLinear::new(w, Tensor::new(vec![m], b)?)
    }

    /// Sum of two layers over the same input.
    pub fn add(&self, other: &Self) -> Result<Self> {
        Ok(FusedLinear {
            weight: self.weight.add(&other.weight)?,
            bias: self.bias.add(&other.bias)?,
        })
    }
}

/// `fc2(fc1(x))` as one layer: `W₂W₁`, `W₂b₁ + b₂`.
pub fn fuse_fc_fc<T: Element>(fc1: &FusedLinear<T>, fc2: &FusedLinear<T>) -> Result<FusedLinear<T>> {
    let (m, k, n) = (fc2.cout(), fc2.cin(), fc1.cin());
    if fc1.cout() != k {
        return Err(Error::merge("linear", format!("{} outputs feed a layer expecting {k}", fc1.cout())));
    }
    let (w1, w2) = (fc1.weight.data(), fc2.weight.data());
    let mut w = vec![T::zero(); m * n];
    let mut b = fc2.bias.data().to_vec();
    for i in 0..m {
        let row = &mut w[i * n..(i + 1) * n];
        for d in 0..k {
            let a = w2[i * k + d];
            b[i] += a * fc1.bias.data()[d];
            for (r, &v) in row.iter_mut().zip(&w1[d * n..(d + 1) * n]) {
                *r += a * v;
            }
        }
    }
    FusedLinear::new(Tensor::new(vec![m, n], w)?, Tensor::new(vec![m], b)?)
}

/// `fc(bn(x))` as one layer, with the norm acting on the input features.
pub fn fold_bn_into_linear<T: Element>(bn: &BnState<T>, fc: &FusedLinear<T>) -> Result<FusedLinear<T>> {
    let n = fc.cin();
    if bn.channels() != n {
        return Err(Error::merge("batchnorm", format!("{} channels before a layer with {n} inputs", bn.channels())));
    }
    let (s, t) = bn.affine();
    let mut w = fc.weight.clone();
    let mut b = fc.bias.data().to_vec();
    for (row, bi) in w.data_mut().chunks_mut(n).zip(b.iter_mut()) {
        for ((v, &si), &ti) in row.iter_mut().zip(&s).zip(&t) {
            *bi += *v * ti;
            *v *= si;
        }
    }
    FusedLinear::new(w, Tensor::new(vec![fc.cout()], b)?)
}

/// `bn(fc(x))` as one layer.
pub fn fuse_linear_bn<T: Element>(fc: &FusedLinear<T>, bn: &BnState<T>) -> Result<FusedLinear<T>> {
    if bn.channels() != fc.cout() {
        return Err(Error::merge(
            "batchnorm",
            format!("{} channels after a layer with {} outputs", bn.channels(), fc.cout()),
        ));
    }
    let (s, t) = bn.affine();
    fc.scale_output(&s, &t)
}

/// A pointwise stride-1 conv followed by a `k×k` conv, as one `k×k` conv with
/// `F̂[e,c] = Σ_d F[e,d]·W[d,c]` and `b̂ = b₂ + Σ F·b₁`. The padding of both
/// stages adds up.
///
/// When the second conv zero-pads, its border taps see zeros where the
/// sequential form sees `b₁`, so outputs within its padding radius of the
/// border differ unless `b₁ = 0`; see [`border_inexact`].
pub fn fuse_conv1x1_convkxk<T: Element>(c1: &FusedConv<T>, c2: &FusedConv<T>) -> Result<FusedConv<T>> {
    if !c1.is_pointwise() || c1.stride != [1, 1] {
        return Err(Error::merge(
            "conv",
            format!("first conv must be 1×1 with stride 1, is {:?} stride {:?}", c1.kernel(), c1.stride),
        ));
    }
    if c1.cout() != c2.cin() {
        return Err(Error::merge("conv", format!("{} channels feed a conv expecting {}", c1.cout(), c2.cin())));
    }
    let (a, f) = (c1.densify(), c2.densify());
    let (e_n, d_n, c_n) = (f.cout(), f.cin(), a.cin());
    let [kh, kw] = f.kernel();
    let taps = kh * kw;
    let (w1, w2) = (a.weight.data(), f.weight.data());
    let mut w = vec![T::zero(); e_n * c_n * taps];
    let mut b = f.bias.data().to_vec();
    for e in 0..e_n {
        for d in 0..d_n {
            let fk = &w2[(e * d_n + d) * taps..(e * d_n + d + 1) * taps];
            let tap_sum: T = fk.iter().copied().sum();
            b[e] += tap_sum * a.bias.data()[d];
            for c in 0..c_n {
                let wdc = w1[d * c_n + c];
                if wdc == T::zero() {
                    continue;
                }
                let out = &mut w[(e * c_n + c) * taps..(e * c_n + c + 1) * taps];
                for (o, &v) in out.iter_mut().zip(fk) {
                    *o += v * wdc;
                }
            }
        }
    }
    FusedConv::new(
        Tensor::new(vec![e_n, c_n, kh, kw], w)?,
        Tensor::new(vec![e_n], b)?,
        c2.stride,
        [c1.padding[0] + c2.padding[0], c1.padding[1] + c2.padding[1]],
        1,
    )
}

/// True when [`fuse_conv1x1_convkxk`] is exact only away from the border.
pub fn border_inexact<T: Element>(c1: &FusedConv<T>, c2: &FusedConv<T>) -> bool {
    c2.padding != [0, 0] && c1.bias.data().iter().any(|&b| b != T::zero())
}

/// A `k×k` conv followed by an unpadded pointwise conv, as one `k×k` conv
/// (`F̂ = W₂·F`, strides multiply). Exact everywhere.
pub fn fuse_convkxk_conv1x1<T: Element>(c1: &FusedConv<T>, c2: &FusedConv<T>) -> Result<FusedConv<T>> {
    if !c2.is_pointwise() || c2.padding != [0, 0] {
        return Err(Error::merge(
            "conv",
            format!("second conv must be 1×1 without padding, is {:?} padding {:?}", c2.kernel(), c2.padding),
        ));
    }
    if c1.cout() != c2.cin() {
        return Err(Error::merge("conv", format!("{} channels feed a conv expecting {}", c1.cout(), c2.cin())));
    }
    let (f, p) = (c1.densify(), c2.densify());
    let (e_n, d_n, c_n) = (p.cout(), p.cin(), f.cin());
    let [kh, kw] = f.kernel();
    let per = c_n * kh * kw;
    let (w1, w2) = (f.weight.data(), p.weight.data());
    let mut w = vec![T::zero(); e_n * per];
    let mut b = p.bias.data().to_vec();
    for e in 0..e_n {
        let out = &mut w[e * per..(e + 1) * per];
        for d in 0..d_n {
            let a = w2[e * d_n + d];
            if a == T::zero() {
                continue;
            }
            b[e] += a * f.bias.data()[d];
            for (o, &v) in out.iter_mut().zip(&w1[d * per..(d + 1) * per]) {
                *o += a * v;
            }
        }
    }
    FusedConv::new(
        Tensor::new(vec![e_n, c_n, kh, kw], w)?,
        Tensor::new(vec![e_n], b)?,
        [c1.stride[0] * c2.stride[0], c1.stride[1] * c2.stride[1]],
        c1.padding,
        1,
    )
}

/// Pointwise expansion, depthwise `k×k`, pointwise projection as one dense
/// `k×k` conv.
pub fn fuse_dw_into_dense<T: Element>(expand: &FusedConv<T>, dw: &FusedConv<T>, project: &FusedConv<T>) -> Result<FusedConv<T>> {
    if !dw.is_depthwise() {
        return Err(Error::merge("conv", format!("middle conv has {} groups, expected depthwise", dw.groups)));
    }
    let inner = fuse_conv1x1_convkxk(expand, dw)?;
    fuse_convkxk_conv1x1(&inner, project)
}

/// Two spatial convs in sequence. Only the case where the first one is a
/// centered `1×1` is closed-form here; anything else is rejected.
pub fn fuse_kxk_kxk_via_center<T: Element>(c1: &FusedConv<T>, c2: &FusedConv<T>) -> Result<FusedConv<T>> {
    if !c1.is_pointwise() {
        return Err(Error::merge(
            "conv",
            format!(
                "cannot fuse a {:?} conv into a following {:?} conv; shrink the first to its 1×1 center",
                c1.kernel(),
                c2.kernel()
            ),
        ));
    }
    fuse_conv1x1_convkxk(c1, c2)
}

/// The shortcut of a residual block.
#[derive(Clone, Debug, PartialEq)]
pub enum SkipBranch<T> {
    Identity,
    Conv(FusedConv<T>),
}

/// Conv that reproduces `x` through a `k×k` kernel with padding `p`
/// (one-hot tap at offset `p`).
pub fn identity_conv<T: Element>(channels: usize, kernel: [usize; 2], padding: [usize; 2]) -> Result<FusedConv<T>> {
    if padding[0] >= kernel[0] || padding[1] >= kernel[1] {
        return Err(Error::merge(
            "add",
            format!("identity cannot be expressed by a {kernel:?} kernel with padding {padding:?}"),
        ));
    }
    let [kh, kw] = kernel;
    let mut w = vec![T::zero(); channels * channels * kh * kw];
    for c in 0..channels {
        w[((c * channels + c) * kh + padding[0]) * kw + padding[1]] = T::one();
    }
    FusedConv::new(
        Tensor::new(vec![channels, channels, kh, kw], w)?,
        Tensor::zeros(vec![channels]),
        [1, 1],
        padding,
        1,
    )
}

/// Re-expresses `c` with a larger `kernel` and `padding`, reading the same
/// input pixels.
pub fn lift_kernel<T: Element>(c: &FusedConv<T>, kernel: [usize; 2], padding: [usize; 2]) -> Result<FusedConv<T>> {
    let d = c.densify();
    let [kh, kw] = d.kernel();
    let off = [padding[0].checked_sub(d.padding[0]), padding[1].checked_sub(d.padding[1])];
    let (Some(oy), Some(ox)) = (off[0], off[1]) else {
        return Err(Error::merge("add", format!("padding {:?} cannot shrink to {padding:?}", d.padding)));
    };
    if oy + kh > kernel[0] || ox + kw > kernel[1] {
        return Err(Error::merge(
            "add",
            format!("a {:?} kernel at offset [{oy}, {ox}] does not fit in {kernel:?}", d.kernel()),
        ));
    }
    let (cout, cin) = (d.cout(), d.cin());
    let mut w = vec![T::zero(); cout * cin * kernel[0] * kernel[1]];
    let src = d.weight.data();
    for oc in 0..cout * cin {
        for u in 0..kh {
            for v in 0..kw {
                w[(oc * kernel[0] + oy + u) * kernel[1] + ox + v] = src[(oc * kh + u) * kw + v];
            }
        }
    }
    FusedConv::new(Tensor::new(vec![cout, cin, kernel[0], kernel[1]], w)?, d.bias.clone(), d.stride, padding, 1)
}

/// `main(x) + skip(x)` as one conv; the skip is embedded in the main kernel
/// at the position that reads the same pixels.
pub fn fuse_branch_add<T: Element>(main: &FusedConv<T>, skip: &SkipBranch<T>) -> Result<FusedConv<T>> {
    let m = main.densify();
    let lifted = match skip {
        SkipBranch::Identity => {
            if m.stride != [1, 1] || m.cin() != m.cout() {
                return Err(Error::merge(
                    "add",
                    format!("identity shortcut around a {}→{} conv with stride {:?}", m.cin(), m.cout(), m.stride),
                ));
            }
            identity_conv(m.cout(), m.kernel(), m.padding)?
        }
        SkipBranch::Conv(s) => {
            if s.stride != m.stride || s.cin() != m.cin() || s.cout() != m.cout() {
                return Err(Error::merge(
                    "add",
                    format!(
                        "shortcut {}→{} stride {:?} does not match main {}→{} stride {:?}",
                        s.cin(),
                        s.cout(),
                        s.stride,
                        m.cin(),
                        m.cout(),
                        m.stride
                    ),
                ));
            }
            lift_kernel(s, m.kernel(), m.padding)?
        }
    };
    FusedConv::new(m.weight.add(&lifted.weight)?, m.bias.add(&lifted.bias)?, m.stride, m.padding, 1)
}
