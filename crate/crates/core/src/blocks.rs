//! The four building blocks of the base U-Net: transition (inception),
//! dense, up and down (dilated inception) blocks.
//!
//! All convolutions carry a bias term. Every convolution is followed either
//! by a normalization stage or by a ReLU, and every normalization stage is
//! followed by a ReLU.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BnRelu, Conv2d, ConvRelu, ConvSpec, ConvTranspose2d, MaxPool2d, Mode, Param, Parameterized, Relu};
use crate::tensor::Tensor;

/// A differentiable feature-map transform.
pub trait Block: Parameterized {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor>;
    fn backward(&mut self, dy: &Tensor) -> Result<Tensor>;
}

fn check_channels(block: &str, expected: usize, x: &Tensor) -> Result<()> {
    if x.channels() != expected {
        return Err(Error::config(format!(
            "{block} block expects {expected} input channels, got {}",
            x.channels()
        )));
    }
    Ok(())
}

/// Inception block: four parallel paths of `b` channels each, fused by a
/// 3x3 convolution from `4b` back to `b` channels. Spatial size is preserved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionBlockSpec {
    pub a: usize,
    pub b: usize,
}

impl TransitionBlockSpec {
    pub fn conv1(&self) -> ConvSpec {
        ConvSpec::new(self.a, self.b, 1)
    }
    /// 1x1 convolution after the 3x3 pool.
    pub fn conv2(&self) -> ConvSpec {
        ConvSpec::new(self.a, self.b, 1)
    }
    pub fn conv31(&self) -> ConvSpec {
        ConvSpec::new(self.a, self.b, 1)
    }
    pub fn conv32(&self) -> ConvSpec {
        ConvSpec::new(self.b, self.b, 3).padding(1)
    }
    pub fn conv41(&self) -> ConvSpec {
        ConvSpec::new(self.a, self.b, 1)
    }
    pub fn conv42(&self) -> ConvSpec {
        ConvSpec::new(self.b, self.b, 5).padding(2)
    }
    pub fn convf(&self) -> ConvSpec {
        ConvSpec::new(4 * self.b, self.b, 3).padding(1)
    }

    pub fn conv_specs(&self) -> Vec<ConvSpec> {
        vec![
            self.conv1(),
            self.conv2(),
            self.conv31(),
            self.conv32(),
            self.conv41(),
            self.conv42(),
            self.convf(),
        ]
    }

    pub fn num_parameters(&self) -> usize {
        self.conv_specs().iter().map(ConvSpec::num_parameters).sum::<usize>() + 2 * self.b
    }

    pub fn output_shape(&self, h: usize, w: usize) -> Option<(usize, usize, usize)> {
        // the 5x5 path is the widest support
        self.conv42().output_size(h, w)?;
        Some((self.b, h, w))
    }

    pub fn validate(&self) -> Result<()> {
        if self.a == 0 || self.b == 0 {
            return Err(Error::config(format!(
                "transition block {:?} has a zero channel count",
                self
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TransitionBlock {
    spec: TransitionBlockSpec,
    path1: ConvRelu,
    pool: MaxPool2d,
    path2: ConvRelu,
    path3a: ConvRelu,
    path3b: ConvRelu,
    path4a: ConvRelu,
    path4b: ConvRelu,
    fuse: Conv2d,
    norm: BnRelu,
}

impl TransitionBlock {
    pub fn new(spec: TransitionBlockSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        Ok(TransitionBlock {
            spec,
            path1: ConvRelu::new(spec.conv1(), rng)?,
            pool: MaxPool2d::new(3, 1, 1),
            path2: ConvRelu::new(spec.conv2(), rng)?,
            path3a: ConvRelu::new(spec.conv31(), rng)?,
            path3b: ConvRelu::new(spec.conv32(), rng)?,
            path4a: ConvRelu::new(spec.conv41(), rng)?,
            path4b: ConvRelu::new(spec.conv42(), rng)?,
            fuse: Conv2d::new(spec.convf(), rng)?,
            norm: BnRelu::new(spec.b),
        })
    }

    pub fn spec(&self) -> &TransitionBlockSpec {
        &self.spec
    }

    /// The `4b`-channel concatenation that feeds the fusing convolution.
    pub fn concat_paths(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        check_channels("transition", self.spec.a, x)?;
        if x.height() < 3 || x.width() < 3 {
            return Err(Error::shape(format!(
                "transition block needs at least 3x3 inputs, got {}x{}",
                x.height(),
                x.width()
            )));
        }
        let p1 = self.path1.forward(x, mode)?;
        let pooled = self.pool.forward(x, mode)?;
        let p2 = self.path2.forward(&pooled, mode)?;
        let p3 = self.path3a.forward(x, mode)?;
        let p3 = self.path3b.forward(&p3, mode)?;
        let p4 = self.path4a.forward(x, mode)?;
        let p4 = self.path4b.forward(&p4, mode)?;
        Tensor::concat_channels(&[&p1, &p2, &p3, &p4])
    }
}

impl Block for TransitionBlock {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let cat = self.concat_paths(x, mode)?;
        let fused = self.fuse.forward(&cat, mode)?;
        self.norm.forward(&fused, mode)
    }

    fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let d = self.norm.backward(dy)?;
        let d = self.fuse.backward(&d)?;
        let b = self.spec.b;
        let parts = d.split_channels(&[b, b, b, b]);
        let mut dx = self.path1.backward(&parts[0])?;
        let d2 = self.path2.backward(&parts[1])?;
        dx.add_assign(&self.pool.backward(&d2)?);
        let d3 = self.path3b.backward(&parts[2])?;
        dx.add_assign(&self.path3a.backward(&d3)?);
        let d4 = self.path4b.backward(&parts[3])?;
        dx.add_assign(&self.path4a.backward(&d4)?);
        Ok(dx)
    }
}

impl Parameterized for TransitionBlock {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.path1.visit_params(f);
        self.path2.visit_params(f);
        self.path3a.visit_params(f);
        self.path3b.visit_params(f);
        self.path4a.visit_params(f);
        self.path4b.visit_params(f);
        self.fuse.visit_params(f);
        self.norm.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.path1.visit_params_mut(f);
        self.path2.visit_params_mut(f);
        self.path3a.visit_params_mut(f);
        self.path3b.visit_params_mut(f);
        self.path4a.visit_params_mut(f);
        self.path4b.visit_params_mut(f);
        self.fuse.visit_params_mut(f);
        self.norm.visit_params_mut(f);
    }
}

/// Simplified dense block with growth rate `k`: channel count in equals
/// channel count out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenseBlockSpec {
    pub a: usize,
    pub k: usize,
}

impl DenseBlockSpec {
    pub fn conv1(&self) -> ConvSpec {
        ConvSpec::new(self.a, self.k, 3).padding(1)
    }
    pub fn conv2(&self) -> ConvSpec {
        ConvSpec::new(self.a + self.k, self.k, 3).padding(1)
    }
    pub fn conv3(&self) -> ConvSpec {
        ConvSpec::new(self.a + 2 * self.k, self.a, 3).padding(1)
    }

    pub fn conv_specs(&self) -> Vec<ConvSpec> {
        vec![self.conv1(), self.conv2(), self.conv3()]
    }

    pub fn num_parameters(&self) -> usize {
        self.conv_specs().iter().map(ConvSpec::num_parameters).sum::<usize>() + 2 * (self.k + self.k + self.a)
    }

    pub fn output_shape(&self, h: usize, w: usize) -> Option<(usize, usize, usize)> {
        self.conv1().output_size(h, w)?;
        Some((self.a, h, w))
    }

    pub fn validate(&self) -> Result<()> {
        if self.a == 0 || self.k == 0 {
            return Err(Error::config(format!(
                "dense block {:?} has a zero channel count",
                self
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DenseBlock {
    spec: DenseBlockSpec,
    conv1: Conv2d,
    norm1: BnRelu,
    conv2: Conv2d,
    norm2: BnRelu,
    conv3: Conv2d,
    norm3: BnRelu,
}

impl DenseBlock {
    pub fn new(spec: DenseBlockSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        Ok(DenseBlock {
            spec,
            conv1: Conv2d::new(spec.conv1(), rng)?,
            norm1: BnRelu::new(spec.k),
            conv2: Conv2d::new(spec.conv2(), rng)?,
            norm2: BnRelu::new(spec.k),
            conv3: Conv2d::new(spec.conv3(), rng)?,
            norm3: BnRelu::new(spec.a),
        })
    }

    pub fn spec(&self) -> &DenseBlockSpec {
        &self.spec
    }
}

impl Block for DenseBlock {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        check_channels("dense", self.spec.a, x)?;
        let h1 = self.conv1.forward(x, mode)?;
        let h1 = self.norm1.forward(&h1, mode)?;
        let cat1 = Tensor::concat_channels(&[x, &h1])?;
        let h2 = self.conv2.forward(&cat1, mode)?;
        let h2 = self.norm2.forward(&h2, mode)?;
        let cat2 = Tensor::concat_channels(&[x, &h1, &h2])?;
        let out = self.conv3.forward(&cat2, mode)?;
        self.norm3.forward(&out, mode)
    }

    fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let (a, k) = (self.spec.a, self.spec.k);
        let d = self.norm3.backward(dy)?;
        let dcat2 = self.conv3.backward(&d)?;
        let mut parts2 = dcat2.split_channels(&[a, k, k]).into_iter();
        let (mut dx, mut dh1, dh2) = (parts2.next().unwrap(), parts2.next().unwrap(), parts2.next().unwrap());
        let d = self.norm2.backward(&dh2)?;
        let dcat1 = self.conv2.backward(&d)?;
        let parts1 = dcat1.split_channels(&[a, k]);
        dx.add_assign(&parts1[0]);
        dh1.add_assign(&parts1[1]);
        let d = self.norm1.backward(&dh1)?;
        dx.add_assign(&self.conv1.backward(&d)?);
        Ok(dx)
    }
}

impl Parameterized for DenseBlock {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.conv1.visit_params(f);
        self.norm1.visit_params(f);
        self.conv2.visit_params(f);
        self.norm2.visit_params(f);
        self.conv3.visit_params(f);
        self.norm3.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv1.visit_params_mut(f);
        self.norm1.visit_params_mut(f);
        self.conv2.visit_params_mut(f);
        self.norm2.visit_params_mut(f);
        self.conv3.visit_params_mut(f);
        self.norm3.visit_params_mut(f);
    }
}

/// Decoder block doubling the spatial size through a stride-2 transposed
/// convolution of kernel `k` and padding `floor(k/2)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpBlockSpec {
    pub a: usize,
    pub p: usize,
    pub b: usize,
    pub k: usize,
}

impl UpBlockSpec {
    pub fn conv1(&self) -> ConvSpec {
        ConvSpec::new(self.a, self.p, 3).padding(1)
    }
    pub fn conv_t1(&self) -> ConvSpec {
        ConvSpec::new(self.p, self.b, self.k).stride(2).padding(self.k / 2)
    }
    pub fn conv2(&self) -> ConvSpec {
        ConvSpec::new(self.b, self.b, 3).padding(1)
    }

    pub fn conv_specs(&self) -> Vec<ConvSpec> {
        vec![self.conv1(), self.conv_t1(), self.conv2()]
    }

    pub fn num_parameters(&self) -> usize {
        self.conv_specs().iter().map(ConvSpec::num_parameters).sum::<usize>() + 2 * self.b
    }

    pub fn output_shape(&self, h: usize, w: usize) -> Option<(usize, usize, usize)> {
        self.conv1().output_size(h, w)?;
        Some((self.b, 2 * h, 2 * w))
    }

    /// Rejects kernels for which the transposed convolution cannot produce an
    /// exact 2x upsampling with padding `floor(k/2)`.
    pub fn validate(&self) -> Result<()> {
        if self.a == 0 || self.p == 0 || self.b == 0 || self.k == 0 {
            return Err(Error::config(format!("up block {:?} has a zero parameter", self)));
        }
        let pad = self.k / 2;
        if self.k < pad + 2 || self.k > 2 + 2 * pad {
            return Err(Error::config(format!(
                "up block kernel k={} with padding {} cannot double the spatial size (use k >= 3)",
                self.k, pad
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct UpBlock {
    spec: UpBlockSpec,
    conv1: ConvRelu,
    up: ConvTranspose2d,
    up_act: Relu,
    conv2: Conv2d,
    norm: BnRelu,
}

impl UpBlock {
    pub fn new(spec: UpBlockSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        Ok(UpBlock {
            spec,
            conv1: ConvRelu::new(spec.conv1(), rng)?,
            up: ConvTranspose2d::new(spec.conv_t1(), rng)?,
            up_act: Relu::default(),
            conv2: Conv2d::new(spec.conv2(), rng)?,
            norm: BnRelu::new(spec.b),
        })
    }

    pub fn spec(&self) -> &UpBlockSpec {
        &self.spec
    }
}

impl Block for UpBlock {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        check_channels("up", self.spec.a, x)?;
        let h = self.conv1.forward(x, mode)?;
        let h = self.up.forward(&h, mode)?;
        let h = self.up_act.forward(&h, mode);
        let h = self.conv2.forward(&h, mode)?;
        self.norm.forward(&h, mode)
    }

    fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let d = self.norm.backward(dy)?;
        let d = self.conv2.backward(&d)?;
        let d = self.up_act.backward(&d)?;
        let d = self.up.backward(&d)?;
        self.conv1.backward(&d)
    }
}

impl Parameterized for UpBlock {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.conv1.visit_params(f);
        self.up.visit_params(f);
        self.conv2.visit_params(f);
        self.norm.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv1.visit_params_mut(f);
        self.up.visit_params_mut(f);
        self.conv2.visit_params_mut(f);
        self.norm.visit_params_mut(f);
    }
}

/// Dilated inception block: three 3x3 paths with dilations 1, 3 and 5, then a
/// stride-2 convolution halving the spatial size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DownBlockSpec {
    pub a: usize,
    pub p: usize,
    pub b: usize,
}

pub const DOWN_DILATIONS: [usize; 3] = [1, 3, 5];

impl DownBlockSpec {
    pub fn dilated(&self, dilation: usize) -> ConvSpec {
        ConvSpec::new(self.a, self.p, 3).padding(dilation).dilation(dilation)
    }
    pub fn conv4(&self) -> ConvSpec {
        ConvSpec::new(3 * self.p, self.b, 3).stride(2).padding(1)
    }
    pub fn conv5(&self) -> ConvSpec {
        ConvSpec::new(self.b, self.b, 1)
    }

    pub fn conv_specs(&self) -> Vec<ConvSpec> {
        let mut v: Vec<ConvSpec> = DOWN_DILATIONS.iter().map(|&d| self.dilated(d)).collect();
        v.push(self.conv4());
        v.push(self.conv5());
        v
    }

    pub fn num_parameters(&self) -> usize {
        self.conv_specs().iter().map(ConvSpec::num_parameters).sum::<usize>() + 2 * self.b
    }

    pub fn output_shape(&self, h: usize, w: usize) -> Option<(usize, usize, usize)> {
        if !h.is_multiple_of(2) || !w.is_multiple_of(2) {
            return None;
        }
        for d in DOWN_DILATIONS {
            self.dilated(d).output_size(h, w)?;
        }
        let (oh, ow) = self.conv4().output_size(h, w)?;
        Some((self.b, oh, ow))
    }

    pub fn validate(&self) -> Result<()> {
        if self.a == 0 || self.p == 0 || self.b == 0 {
            return Err(Error::config(format!("down block {:?} has a zero channel count", self)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DownBlock {
    spec: DownBlockSpec,
    paths: Vec<ConvRelu>,
    reduce: ConvRelu,
    conv5: Conv2d,
    norm: BnRelu,
}

impl DownBlock {
    pub fn new(spec: DownBlockSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let paths = DOWN_DILATIONS
            .iter()
            .map(|&d| ConvRelu::new(spec.dilated(d), rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(DownBlock {
            spec,
            paths,
            reduce: ConvRelu::new(spec.conv4(), rng)?,
            conv5: Conv2d::new(spec.conv5(), rng)?,
            norm: BnRelu::new(spec.b),
        })
    }

    pub fn spec(&self) -> &DownBlockSpec {
        &self.spec
    }

    /// The `3p`-channel concatenation of the dilated paths, at input resolution.
    pub fn concat_paths(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        check_channels("down", self.spec.a, x)?;
        if !x.height().is_multiple_of(2) || !x.width().is_multiple_of(2) {
            return Err(Error::shape(format!(
                "down block needs even spatial sizes, got {}x{}",
                x.height(),
                x.width()
            )));
        }
        let outs = self
            .paths
            .iter_mut()
            .map(|p| p.forward(x, mode))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor> = outs.iter().collect();
        Tensor::concat_channels(&refs)
    }
}

impl Block for DownBlock {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let cat = self.concat_paths(x, mode)?;
        let h = self.reduce.forward(&cat, mode)?;
        let h = self.conv5.forward(&h, mode)?;
        self.norm.forward(&h, mode)
    }

    fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let d = self.norm.backward(dy)?;
        let d = self.conv5.backward(&d)?;
        let d = self.reduce.backward(&d)?;
        let p = self.spec.p;
        let parts = d.split_channels(&[p, p, p]);
        let mut dx: Option<Tensor> = None;
        for (path, part) in self.paths.iter_mut().zip(&parts) {
            let g = path.backward(part)?;
            match &mut dx {
                Some(acc) => acc.add_assign(&g),
                None => dx = Some(g),
            }
        }
        Ok(dx.expect("three dilated paths"))
    }
}

impl Parameterized for DownBlock {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        for p in &self.paths {
            p.visit_params(f);
        }
        self.reduce.visit_params(f);
        self.conv5.visit_params(f);
        self.norm.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for p in &mut self.paths {
            p.visit_params_mut(f);
        }
        self.reduce.visit_params_mut(f);
        self.conv5.visit_params_mut(f);
        self.norm.visit_params_mut(f);
    }
}

macro_rules! layer_block {
    ($($t:ty),*) => {$(
        impl Block for $t {
            fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
                <$t>::forward(self, x, mode)
            }

            fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
                <$t>::backward(self, dy)
            }
        }
    )*};
}

layer_block!(Conv2d, ConvTranspose2d, ConvRelu, BnRelu, crate::nn::BatchNorm2d);
