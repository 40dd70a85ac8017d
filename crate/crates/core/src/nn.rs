//! Layers, parameter registry, Adam, and the parameter blob format.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T: Scalar> {
    entries: Vec<(String, Var<T>)>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor<T>) -> Var<T> {
        let var = Var::parameter(value);
        self.entries.push((name.into(), var.clone()));
        var
    }

    pub fn iter(&self) -> impl Iterator<Item = &(String, Var<T>)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.value().len()).sum()
    }

    pub fn zero_grad(&self) {
        for (_, v) in &self.entries {
            v.zero_grad();
        }
    }

    pub fn snapshot(&self) -> Vec<Tensor<T>> {
        self.entries.iter().map(|(_, v)| v.to_tensor()).collect()
    }

    pub fn restore(&self, values: &[Tensor<T>]) -> Result<()> {
        if values.len() != self.entries.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, got {}",
                self.entries.len(),
                values.len()
            )));
        }
        for ((name, v), t) in self.entries.iter().zip(values) {
            if v.value().shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {name}: {:?} vs {:?}",
                    v.value().shape(),
                    t.shape()
                )));
            }
            v.set_value(t.clone());
        }
        Ok(())
    }

    /// True when any stored value is NaN or infinite.
    pub fn has_non_finite(&self) -> bool {
        self.entries.iter().any(|(_, v)| !v.value().all_finite())
    }

    const MAGIC: &'static [u8; 8] = b"ISBPARAM";

    /// Serialize as: magic, u32 version, dtype tag, u32 count, then per
    /// tensor the name, rank, dims and little-endian data.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(Self::MAGIC);
        out.extend_from_slice(&1u32.to_le_bytes());
        out.extend_from_slice(&(T::DTYPE.len() as u32).to_le_bytes());
        out.extend_from_slice(T::DTYPE.as_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, v) in &self.entries {
            let t = v.value();
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                x.write_le(&mut out);
            }
        }
        out
    }

    pub fn load_bytes(&self, bytes: &[u8]) -> Result<()> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != Self::MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let _version = r.u32()?;
        let tag_len = r.u32()? as usize;
        let tag = r.take(tag_len)?;
        if tag != T::DTYPE.as_bytes() {
            return Err(Error::Checkpoint(format!(
                "dtype {} does not match {}",
                String::from_utf8_lossy(tag),
                T::DTYPE
            )));
        }
        let count = r.u32()? as usize;
        if count != self.entries.len() {
            return Err(Error::Checkpoint(format!(
                "blob holds {count} tensors, model has {}",
                self.entries.len()
            )));
        }
        let mut values = Vec::with_capacity(count);
        for (name, _) in &self.entries {
            let nlen = r.u32()? as usize;
            let stored = r.take(nlen)?;
            if stored != name.as_bytes() {
                return Err(Error::Checkpoint(format!(
                    "expected tensor {name}, found {}",
                    String::from_utf8_lossy(stored)
                )));
            }
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n * T::BYTES)?;
            let data = raw.chunks(T::BYTES).map(T::read_le).collect();
            values.push(Tensor::from_vec(&shape, data)?);
        }
        self.restore(&values)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::util::write_file(path, self.to_bytes())
    }

    pub fn load(&self, path: &Path) -> Result<()> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        self.load_bytes(&bytes)
    }
}

/// Build a divergence error, dumping the parameter sets and `state` under
/// `out_dir` when one is given.
pub fn divergence<T: Scalar>(
    out_dir: Option<&Path>,
    epoch: usize,
    step: usize,
    detail: String,
    sets: &[(&str, &ParamSet<T>)],
    state: &serde_json::Value,
) -> Error {
    let dump = out_dir.map(|d| d.join(format!("divergence-e{epoch}-s{step}")));
    if let Some(dir) = &dump {
        // best effort; the divergence itself is the error being reported
        for (name, params) in sets {
            let _ = params.save(&dir.join(format!("{name}.bin")));
        }
        let _ = crate::util::write_json(&dir.join("state.json"), state);
    }
    Error::Divergence {
        epoch,
        step,
        detail,
        dump,
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Checkpoint("truncated parameter blob".into()));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn uniform<T: Scalar>(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::lit(if bound > 0.0 { rng.gen_range(-bound..bound) } else { 0.0 }))
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

#[derive(Clone, Debug)]
pub struct Conv2d<T: Scalar> {
    pub weight: Var<T>,
    pub bias: Option<Var<T>>,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl<T: Scalar> Conv2d<T> {
    /// He-uniform weights, zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut ParamSet<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = (cin * kernel * kernel) as f64;
        let weight = params.register(
            format!("{name}.weight"),
            uniform(&[cout, cin, kernel, kernel], (6.0 / fan_in).sqrt(), rng),
        );
        let bias = Some(params.register(format!("{name}.bias"), Tensor::zeros(&[cout])));
        Conv2d {
            weight,
            bias,
            stride,
            pad,
            dilation: 1,
        }
    }

    pub fn dilated(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    /// Zero the weights (residual heads that start as the identity).
    pub fn zeroed(self) -> Self {
        let shape = self.weight.shape();
        self.weight.set_value(Tensor::zeros(&shape));
        self
    }

    pub fn forward(&self, x: &Var<T>) -> Result<Var<T>> {
        x.conv2d(&self.weight, self.bias.as_ref(), self.stride, self.pad, self.dilation)
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2d<T: Scalar> {
    pub weight: Var<T>,
    pub bias: Option<Var<T>>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Scalar> ConvTranspose2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut ParamSet<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        // each output pixel sees about cin * (k/stride)^2 inputs
        let fan_in = (cin * kernel * kernel / (stride * stride)).max(1) as f64;
        let weight = params.register(
            format!("{name}.weight"),
            uniform(&[cin, cout, kernel, kernel], (6.0 / fan_in).sqrt(), rng),
        );
        let bias = Some(params.register(format!("{name}.bias"), Tensor::zeros(&[cout])));
        ConvTranspose2d {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Var<T>) -> Result<Var<T>> {
        x.conv_transpose2d(&self.weight, self.bias.as_ref(), self.stride, self.pad)
    }
}

const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
struct ConvBlock<T: Scalar> {
    a: Conv2d<T>,
    b: Conv2d<T>,
}

impl<T: Scalar> ConvBlock<T> {
    fn forward(&self, x: &Var<T>) -> Result<Var<T>> {
        let eps = T::lit(NORM_EPS);
        let h = self.a.forward(x)?.instance_norm(eps).relu();
        Ok(self.b.forward(&h)?.instance_norm(eps).relu())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UNetOutput {
    /// Input plus head output; the head starts at zero.
    Residual,
    Sigmoid,
    Logits,
}

/// UNet with strided-conv downsampling and one skip per resolution.
#[derive(Clone, Debug)]
pub struct UNet<T: Scalar> {
    inc: ConvBlock<T>,
    downs: Vec<ConvBlock<T>>,
    ups: Vec<(ConvTranspose2d<T>, Conv2d<T>)>,
    head: Conv2d<T>,
    in_channels: usize,
    output: UNetOutput,
}

impl<T: Scalar> UNet<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut ParamSet<T>,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        widths: &[usize],
        output: UNetOutput,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(output != UNetOutput::Residual || in_channels == out_channels);
        let w = widths;
        let inc = ConvBlock {
            a: Conv2d::new(params, &format!("{prefix}.inc.a"), in_channels, w[0], 3, 1, 1, rng),
            b: Conv2d::new(params, &format!("{prefix}.inc.b"), w[0], w[0], 3, 1, 1, rng),
        };
        let downs = (1..w.len())
            .map(|i| ConvBlock {
                a: Conv2d::new(params, &format!("{prefix}.down{i}.a"), w[i - 1], w[i], 4, 2, 1, rng),
                b: Conv2d::new(params, &format!("{prefix}.down{i}.b"), w[i], w[i], 3, 1, 1, rng),
            })
            .collect();
        let ups = (1..w.len())
            .rev()
            .map(|i| {
                (
                    ConvTranspose2d::new(params, &format!("{prefix}.up{i}.t"), w[i], w[i - 1], 4, 2, 1, rng),
                    Conv2d::new(
                        params,
                        &format!("{prefix}.up{i}.c"),
                        2 * w[i - 1],
                        w[i - 1],
                        3,
                        1,
                        1,
                        rng,
                    ),
                )
            })
            .collect();
        let head = Conv2d::new(params, &format!("{prefix}.head"), w[0], out_channels, 3, 1, 1, rng);
        let head = if output == UNetOutput::Residual {
            head.zeroed()
        } else {
            head
        };
        UNet {
            inc,
            downs,
            ups,
            head,
            in_channels,
            output,
        }
    }

    pub fn depth(&self) -> usize {
        self.downs.len()
    }

    pub fn forward(&self, x: &Var<T>) -> Result<Var<T>> {
        let shape = x.shape();
        let f = 1usize << self.depth();
        if shape.len() != 4
            || shape[1] != self.in_channels
            || !shape[2].is_multiple_of(f)
            || !shape[3].is_multiple_of(f)
        {
            return Err(Error::Shape(format!(
                "UNet expects [n, {}, h, w] with h, w divisible by {f}, got {shape:?}",
                self.in_channels
            )));
        }
        let eps = T::lit(NORM_EPS);
        let mut skips = vec![self.inc.forward(x)?];
        for d in &self.downs {
            let next = d.forward(skips.last().unwrap())?;
            skips.push(next);
        }
        let mut h = skips.pop().unwrap();
        for (up, fuse) in &self.ups {
            let u = up.forward(&h)?.instance_norm(eps).relu();
            let skip = skips.pop().unwrap();
            h = fuse
                .forward(&Var::concat_channels(&[&u, &skip])?)?
                .instance_norm(eps)
                .relu();
        }
        let out = self.head.forward(&h)?;
        Ok(match self.output {
            UNetOutput::Residual => x.add(&out),
            UNetOutput::Sigmoid => out.sigmoid(),
            UNetOutput::Logits => out,
        })
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    moments: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamSet<T>, lr: f64, beta1: f64, beta2: f64) -> Self {
        let moments = params
            .iter()
            .map(|(_, v)| {
                let s = v.shape();
                (Tensor::zeros(&s), Tensor::zeros(&s))
            })
            .collect();
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            moments,
        }
    }

    /// Apply one update from the accumulated gradients, then clear them.
    pub fn step(&mut self, params: &ParamSet<T>) {
        self.step += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(self.step));
        let c2 = T::lit(1.0 - self.beta2.powi(self.step));
        let (lr, eps) = (T::lit(self.lr), T::lit(self.eps));
        let one = T::one();
        for ((_, var), (m, v)) in params.iter().zip(self.moments.iter_mut()) {
            let Some(g) = var.grad() else { continue };
            var.update(|p| {
                for (((p, &g), m), v) in p
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .zip(m.data_mut())
                    .zip(v.data_mut())
                {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let mhat = *m / c1;
                    let vhat = *v / c2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                }
            });
            var.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn blob_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut ps = ParamSet::<f32>::new();
        Conv2d::new(&mut ps, "a", 2, 3, 3, 1, 1, &mut rng);
        ConvTranspose2d::new(&mut ps, "b", 3, 2, 4, 2, 1, &mut rng);
        let bytes = ps.to_bytes();
        let mut rng2 = ChaCha8Rng::seed_from_u64(10);
        let mut other = ParamSet::<f32>::new();
        Conv2d::new(&mut other, "a", 2, 3, 3, 1, 1, &mut rng2);
        ConvTranspose2d::new(&mut other, "b", 3, 2, 4, 2, 1, &mut rng2);
        other.load_bytes(&bytes).unwrap();
        assert_eq!(ps.snapshot(), other.snapshot());
    }

    #[test]
    fn blob_rejects_wrong_dtype_and_names() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut ps = ParamSet::<f32>::new();
        Conv2d::new(&mut ps, "a", 1, 1, 1, 1, 0, &mut rng);
        let bytes = ps.to_bytes();
        let mut wide = ParamSet::<f64>::new();
        Conv2d::new(&mut wide, "a", 1, 1, 1, 1, 0, &mut rng);
        assert!(wide.load_bytes(&bytes).is_err());
        let mut renamed = ParamSet::<f32>::new();
        Conv2d::new(&mut renamed, "z", 1, 1, 1, 1, 0, &mut rng);
        assert!(renamed.load_bytes(&bytes).is_err());
        assert!(ps.load_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut ps = ParamSet::<f64>::new();
        let x = ps.register("x", Tensor::from_vec(&[2], vec![3.0, -2.0]).unwrap());
        let mut opt = Adam::new(&ps, 0.1, 0.9, 0.999);
        for _ in 0..500 {
            let loss = x.mul(&x).l1(&Var::constant(Tensor::zeros(&[2])));
            loss.backward();
            opt.step(&ps);
        }
        assert!(x.value().data().iter().all(|v| v.abs() < 0.05));
    }
}
