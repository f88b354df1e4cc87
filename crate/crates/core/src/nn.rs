//! Layers with explicit forward caches and hand-written backward passes,
//! plus the U-Net trunk built from them.
//!
//! Feature maps are `channels × height × width`, row-major. Convolutions are
//! lowered to GEMM through im2col.

use rand::RngExt;
use rand_chacha::ChaCha8Rng;

use crate::real::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct Feature<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Real> Feature<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![T::zero(); channels * height * width],
        }
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// Ordered, named parameter tensors. Order is fixed by construction and is
/// the order used by the optimizer, gradient norms and checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    tensors: Vec<ParamTensor<T>>,
}

impl<T> Default for ParamStore<T> {
    fn default() -> Self {
        Self { tensors: Vec::new() }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> ParamId {
        let name = name.into();
        assert_eq!(shape.iter().product::<usize>(), data.len(), "param {name} shape mismatch");
        assert!(self.find(&name).is_none(), "duplicate param {name}");
        self.tensors.push(ParamTensor {
            name,
            shape,
            data: data.into_iter().map(T::lit).collect(),
        });
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        &self.tensors[id.0].data
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.tensors[id.0].data
    }

    pub fn tensors(&self) -> &[ParamTensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [ParamTensor<T>] {
        &mut self.tensors
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.tensors.iter().position(|t| t.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|t| ParamTensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: t.data.iter().map(|&x| U::lit(x.f64())).collect(),
                })
                .collect(),
        }
    }
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    tensors: Vec<Vec<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Self {
            tensors: store
                .tensors
                .iter()
                .map(|t| vec![T::zero(); t.data.len()])
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.tensors[id.0]
    }

    pub fn tensors(&self) -> &[Vec<T>] {
        &self.tensors
    }

    pub fn add_assign(&mut self, other: &Gradients<T>) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += *y);
        }
    }

    pub fn scale(&mut self, s: T) {
        self.tensors
            .iter_mut()
            .for_each(|t| t.iter_mut().for_each(|x| *x *= s));
    }

    /// L2 norm over every parameter, accumulated in f64 in a fixed order.
    pub fn global_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.iter())
            .map(|x| x.f64() * x.f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|x| x.is_finite()))
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
}

/// Kaiming-uniform bound for a layer followed by a leaky ReLU with `slope`.
pub fn kaiming_bound(fan_in: usize, slope: f64) -> f64 {
    let gain = (2.0 / (1.0 + slope * slope)).sqrt();
    gain * (3.0 / fan_in as f64).sqrt()
}

pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

pub fn xavier_uniform(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Vec<f64> {
    uniform(rng, fan_in * fan_out, xavier_bound(fan_in, fan_out))
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

pub struct ConvCache<T> {
    /// im2col matrix; `None` for pointwise convolutions, which read the input directly.
    cols: Option<Vec<T>>,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        init_bound: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            vec![out_ch, in_ch, kernel, kernel],
            uniform(rng, out_ch * fan_in, init_bound),
        );
        let bias = store.add(format!("{name}.bias"), vec![out_ch], vec![0.0; out_ch]);
        Self {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output columns `ox` whose input column `ox·stride + kj − pad` lies in `0..w`.
    fn valid_cols(&self, kj: usize, w: usize, ow: usize) -> std::ops::Range<usize> {
        let (s, pad) = (self.stride, self.pad);
        let lo = pad.saturating_sub(kj).div_ceil(s);
        let hi = if w + pad > kj { (w + pad - kj - 1) / s + 1 } else { 0 };
        lo.min(ow)..hi.min(ow).max(lo.min(ow))
    }

    fn im2col<T: Real>(&self, x: &Feature<T>, oh: usize, ow: usize) -> Vec<T> {
        let k = self.kernel;
        let (s, pad) = (self.stride, self.pad);
        let p = oh * ow;
        let mut cols = vec![T::zero(); self.fan_in() * p];
        for ci in 0..self.in_ch {
            let plane = x.channel(ci);
            for ki in 0..k {
                for kj in 0..k {
                    let row = &mut cols[((ci * k + ki) * k + kj) * p..][..p];
                    let range = self.valid_cols(kj, x.width, ow);
                    if range.is_empty() {
                        continue;
                    }
                    let ix0 = range.start * s + kj - pad;
                    for oy in 0..oh {
                        let iy = oy * s + ki;
                        if iy < pad || iy - pad >= x.height {
                            continue;
                        }
                        let src = &plane[(iy - pad) * x.width..][..x.width];
                        let dst = &mut row[oy * ow + range.start..oy * ow + range.end];
                        if s == 1 {
                            dst.copy_from_slice(&src[ix0..ix0 + dst.len()]);
                        } else {
                            for (i, d) in dst.iter_mut().enumerate() {
                                *d = src[ix0 + i * s];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<T: Real>(&self, dcols: &[T], h: usize, w: usize, oh: usize, ow: usize) -> Feature<T> {
        let k = self.kernel;
        let (s, pad) = (self.stride, self.pad);
        let p = oh * ow;
        let mut dx = Feature::zeros(self.in_ch, h, w);
        for ci in 0..self.in_ch {
            let plane = &mut dx.data[ci * h * w..][..h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = &dcols[((ci * k + ki) * k + kj) * p..][..p];
                    let range = self.valid_cols(kj, w, ow);
                    if range.is_empty() {
                        continue;
                    }
                    let ix0 = range.start * s + kj - pad;
                    for oy in 0..oh {
                        let iy = oy * s + ki;
                        if iy < pad || iy - pad >= h {
                            continue;
                        }
                        let dst = &mut plane[(iy - pad) * w..][..w];
                        let src = &row[oy * ow + range.start..oy * ow + range.end];
                        for (i, &g) in src.iter().enumerate() {
                            dst[ix0 + i * s] += g;
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward<T: Real>(&self, params: &ParamStore<T>, x: &Feature<T>) -> (Feature<T>, ConvCache<T>) {
        assert_eq!(x.channels, self.in_ch, "conv input channels");
        let (oh, ow) = self.out_size(x.height, x.width);
        let p = oh * ow;
        let mut out = Feature::zeros(self.out_ch, oh, ow);
        let bias = params.get(self.bias);
        for (c, &b) in bias.iter().enumerate() {
            out.data[c * p..(c + 1) * p].iter_mut().for_each(|v| *v = b);
        }
        let cols = if self.pointwise() { None } else { Some(self.im2col(x, oh, ow)) };
        let b_mat = cols.as_deref().unwrap_or(&x.data);
        T::gemm(
            self.out_ch,
            self.fan_in(),
            p,
            params.get(self.weight),
            false,
            b_mat,
            false,
            &mut out.data,
            true,
        );
        (out, ConvCache { cols })
    }

    /// Accumulates weight/bias gradients and returns the input gradient when
    /// `need_dx` is set.
    pub fn backward<T: Real>(
        &self,
        params: &ParamStore<T>,
        x: &Feature<T>,
        cache: &ConvCache<T>,
        dy: &Feature<T>,
        grads: &mut Gradients<T>,
        need_dx: bool,
    ) -> Option<Feature<T>> {
        let (oh, ow) = (dy.height, dy.width);
        let p = oh * ow;
        let cols = cache.cols.as_deref().unwrap_or(&x.data);
        {
            let db = grads.get_mut(self.bias);
            for (c, g) in db.iter_mut().enumerate() {
                *g += dy.data[c * p..(c + 1) * p].iter().copied().sum::<T>();
            }
        }
        T::gemm(
            self.out_ch,
            p,
            self.fan_in(),
            &dy.data,
            false,
            cols,
            true,
            grads.get_mut(self.weight),
            true,
        );
        if !need_dx {
            return None;
        }
        let mut dcols = vec![T::zero(); self.fan_in() * p];
        T::gemm(
            self.fan_in(),
            self.out_ch,
            p,
            params.get(self.weight),
            true,
            &dy.data,
            false,
            &mut dcols,
            false,
        );
        if self.pointwise() {
            return Some(Feature {
                channels: self.in_ch,
                height: x.height,
                width: x.width,
                data: dcols,
            });
        }
        Some(self.col2im(&dcols, x.height, x.width, oh, ow))
    }
}

pub fn leaky_relu<T: Real>(x: &mut Feature<T>, slope: T) {
    x.data.iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v *= slope
        }
    });
}

/// Backward of [`leaky_relu`] given its output (sign of output = sign of input).
pub fn leaky_relu_backward<T: Real>(y: &Feature<T>, dy: &mut Feature<T>, slope: T) {
    dy.data.iter_mut().zip(&y.data).for_each(|(g, &v)| {
        if v < T::zero() {
            *g *= slope
        }
    });
}

pub fn upsample2x<T: Real>(x: &Feature<T>) -> Feature<T> {
    let (h, w) = (x.height * 2, x.width * 2);
    let mut out = Feature::zeros(x.channels, h, w);
    for c in 0..x.channels {
        let src = x.channel(c);
        let dst = &mut out.data[c * h * w..][..h * w];
        for y in 0..h {
            let srow = &src[(y / 2) * x.width..][..x.width];
            for (xx, d) in dst[y * w..][..w].iter_mut().enumerate() {
                *d = srow[xx / 2];
            }
        }
    }
    out
}

pub fn upsample2x_backward<T: Real>(dy: &Feature<T>) -> Feature<T> {
    let (h, w) = (dy.height / 2, dy.width / 2);
    let mut dx = Feature::zeros(dy.channels, h, w);
    for c in 0..dy.channels {
        let src = dy.channel(c);
        let dst = &mut dx.data[c * h * w..][..h * w];
        for y in 0..dy.height {
            for x in 0..dy.width {
                dst[(y / 2) * w + x / 2] += src[y * dy.width + x];
            }
        }
    }
    dx
}

pub fn concat<T: Real>(a: &Feature<T>, b: &Feature<T>) -> Feature<T> {
    assert_eq!((a.height, a.width), (b.height, b.width), "concat spatial mismatch");
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Feature {
        channels: a.channels + b.channels,
        height: a.height,
        width: a.width,
        data,
    }
}

fn split_channels<T: Real>(x: Feature<T>, first: usize) -> (Feature<T>, Feature<T>) {
    let p = x.plane();
    let mut data = x.data;
    let rest = data.split_off(first * p);
    (
        Feature {
            channels: first,
            height: x.height,
            width: x.width,
            data,
        },
        Feature {
            channels: x.channels - first,
            height: x.height,
            width: x.width,
            data: rest,
        },
    )
}

/// U-Net: `depth` stride-2 3×3 encoder convolutions, nearest-neighbour
/// upsampling followed by 3×3 convolutions on the way up, skip concatenation
/// at every level, leaky-ReLU interior and a final pointwise layer emitting
/// `out_ch` channels.
#[derive(Clone, Debug)]
pub struct UNet {
    down: Vec<Conv2d>,
    up: Vec<Conv2d>,
    head: Conv2d,
    in_ch: usize,
    slope: f64,
}

pub struct UNetCache<T> {
    /// `h[0]` is the input, `h[l+1]` the activated output of encoder level `l`.
    h: Vec<Feature<T>>,
    down: Vec<ConvCache<T>>,
    up_in: Vec<Feature<T>>,
    up_out: Vec<Feature<T>>,
    up: Vec<ConvCache<T>>,
    head_in: Feature<T>,
    head: ConvCache<T>,
}

impl UNet {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        in_ch: usize,
        base: usize,
        depth: usize,
        out_ch: usize,
        slope: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let enc: Vec<usize> = (0..depth).map(|l| base << l.min(3)).collect();
        let mut down = Vec::with_capacity(depth);
        let mut ch = in_ch;
        for (l, &c) in enc.iter().enumerate() {
            let bound = kaiming_bound(ch * 9, slope);
            down.push(Conv2d::new(store, &format!("unet.down.{l}"), ch, c, 3, 2, 1, bound, rng));
            ch = c;
        }
        // Decoder levels are built bottom-up so parameter order follows data flow.
        let mut up_rev = Vec::with_capacity(depth);
        let mut u_ch = enc[depth - 1];
        for l in (0..depth).rev() {
            let (out, skip) = if l == 0 { (base, in_ch) } else { (enc[l - 1], enc[l - 1]) };
            let bound = kaiming_bound(u_ch * 9, slope);
            up_rev.push(Conv2d::new(store, &format!("unet.up.{l}"), u_ch, out, 3, 1, 1, bound, rng));
            u_ch = out + skip;
        }
        up_rev.reverse();
        let head = Conv2d::new(store, "unet.head", u_ch, out_ch, 1, 1, 0, (3.0 / u_ch as f64).sqrt(), rng);
        Self {
            down,
            up: up_rev,
            head,
            in_ch,
            slope,
        }
    }

    pub fn depth(&self) -> usize {
        self.down.len()
    }

    pub fn in_channels(&self) -> usize {
        self.in_ch
    }

    pub fn out_channels(&self) -> usize {
        self.head.out_ch
    }

    /// Input height and width must be multiples of `2^depth`.
    pub fn forward<T: Real>(&self, params: &ParamStore<T>, x: Feature<T>) -> (Feature<T>, UNetCache<T>) {
        let depth = self.depth();
        assert!(
            x.height.is_multiple_of(1 << depth) && x.width.is_multiple_of(1 << depth),
            "U-Net input {}x{} not divisible by 2^{depth}",
            x.height,
            x.width
        );
        let slope = T::lit(self.slope);
        let mut h = vec![x];
        let mut down = Vec::with_capacity(depth);
        for conv in &self.down {
            let (mut a, cache) = conv.forward(params, h.last().unwrap());
            leaky_relu(&mut a, slope);
            h.push(a);
            down.push(cache);
        }
        let mut up_in = Vec::with_capacity(depth);
        let mut up_out = Vec::with_capacity(depth);
        let mut up = Vec::with_capacity(depth);
        let mut u = h[depth].clone();
        for l in (0..depth).rev() {
            let xin = upsample2x(&u);
            let (mut r, cache) = self.up[l].forward(params, &xin);
            leaky_relu(&mut r, slope);
            u = concat(&r, &h[l]);
            up_in.push(xin);
            up_out.push(r);
            up.push(cache);
        }
        up_in.reverse();
        up_out.reverse();
        up.reverse();
        let (out, head) = self.head.forward(params, &u);
        (
            out,
            UNetCache {
                h,
                down,
                up_in,
                up_out,
                up,
                head_in: u,
                head,
            },
        )
    }

    pub fn backward<T: Real>(
        &self,
        params: &ParamStore<T>,
        cache: &UNetCache<T>,
        dout: &Feature<T>,
        grads: &mut Gradients<T>,
    ) {
        let depth = self.depth();
        let slope = T::lit(self.slope);
        let mut dh: Vec<Option<Feature<T>>> = (0..=depth).map(|_| None).collect();
        let add = |slot: &mut Option<Feature<T>>, g: Feature<T>| match slot {
            Some(acc) => acc.data.iter_mut().zip(&g.data).for_each(|(a, b)| *a += *b),
            None => *slot = Some(g),
        };
        let mut du = self
            .head
            .backward(params, &cache.head_in, &cache.head, dout, grads, true)
            .unwrap();
        for l in 0..depth {
            let (mut dr, dskip) = split_channels(du, self.up[l].out_ch);
            if l > 0 {
                add(&mut dh[l], dskip);
            }
            leaky_relu_backward(&cache.up_out[l], &mut dr, slope);
            let dxin = self.up[l]
                .backward(params, &cache.up_in[l], &cache.up[l], &dr, grads, true)
                .unwrap();
            du = upsample2x_backward(&dxin);
        }
        add(&mut dh[depth], du);
        for l in (0..depth).rev() {
            let mut da = dh[l + 1].take().expect("gradient reaches every level");
            leaky_relu_backward(&cache.h[l + 1], &mut da, slope);
            if let Some(dx) = self.down[l].backward(params, &cache.h[l], &cache.down[l], &da, grads, l > 0) {
                add(&mut dh[l], dx);
            }
        }
    }
}
