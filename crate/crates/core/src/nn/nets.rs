//! DC-GAN-shaped generator and critic sized for desk-scale runs.
//!
//! Generator: dense `n_z → C0·s·s`, two stride-2 transposed convolutions
//! (`s → 2s → 4s`), tanh output with 5 channels.
//! Critic: two stride-2 convolutions (`H → H/2 → H/4`) with leaky ReLU and a
//! dense scalar head, no output squashing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHANNELS: usize = 5;
const KERNEL: usize = 4;
const LEAK: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GeneratorShape {
    pub n_z: usize,
    pub image_size: usize,
    /// Channels after the dense projection and after the first upsampling.
    pub channels: (usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CriticShape {
    pub image_size: usize,
    pub channels: (usize, usize),
}

fn check_size(image_size: usize) -> Result<()> {
    if image_size < 8 || image_size % 4 != 0 {
        return Err(Error::invalid(format!(
            "image size must be a multiple of 4 and >= 8, got {image_size}"
        )));
    }
    Ok(())
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let len: usize = shape.iter().product();
    Tensor {
        shape,
        data: (0..len).map(|_| rng.gen_range(-bound..bound)).collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorNet {
    pub shape: GeneratorShape,
    /// dense.w `[n_z, C0·s·s]`, dense.b, up1.w `[C0, C1, 4, 4]`, up1.b,
    /// up2.w `[C1, 5, 4, 4]`, up2.b.
    pub params: Vec<Tensor>,
}

impl GeneratorNet {
    pub const PARAM_NAMES: [&'static str; 6] =
        ["dense.w", "dense.b", "up1.w", "up1.b", "up2.w", "up2.b"];

    pub fn new(shape: GeneratorShape, seed: u64) -> Result<Self> {
        check_size(shape.image_size)?;
        if shape.n_z == 0 {
            return Err(Error::invalid("n_z must be >= 1"));
        }
        let (c0, c1) = shape.channels;
        let s = shape.image_size / 4;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = vec![
            uniform(&mut rng, vec![shape.n_z, c0 * s * s], shape.n_z),
            Tensor::zeros(vec![c0 * s * s]),
            uniform(&mut rng, vec![c0, c1, KERNEL, KERNEL], c0 * KERNEL),
            Tensor::zeros(vec![c1]),
            uniform(&mut rng, vec![c1, CHANNELS, KERNEL, KERNEL], c1 * KERNEL),
            Tensor::zeros(vec![CHANNELS]),
        ];
        Ok(GeneratorNet { shape, params })
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<NodeId> {
        self.params
            .iter()
            .map(|p| g.leaf(p.clone(), trainable))
            .collect()
    }

    /// `z: [B, n_z]` → `[B, 5, H, W]` in `[-1, 1]`.
    pub fn forward(&self, g: &mut Graph, p: &[NodeId], z: NodeId) -> Result<NodeId> {
        let zs = g.shape(z).to_vec();
        if zs.len() != 2 || zs[1] != self.shape.n_z {
            return Err(Error::shape(format!(
                "latent {zs:?}, expected [B, {}]",
                self.shape.n_z
            )));
        }
        let b = zs[0];
        let c0 = self.shape.channels.0;
        let s = self.shape.image_size / 4;
        let h = g.matmul(z, p[0])?;
        let h = g.add_bias(h, p[1])?;
        let h = g.leaky_relu(h, LEAK);
        let h = g.reshape(h, &[b, c0, s, s])?;
        let h = g.conv_transpose2d(h, p[2], 2, 1, (2 * s, 2 * s))?;
        let h = g.add_bias(h, p[3])?;
        let h = g.leaky_relu(h, LEAK);
        let h = g.conv_transpose2d(h, p[4], 2, 1, (4 * s, 4 * s))?;
        let h = g.add_bias(h, p[5])?;
        Ok(g.tanh(h))
    }

    /// Forward pass without recording gradients.
    pub fn generate(&self, z: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let zn = g.constant(z.clone());
        let out = self.forward(&mut g, &p, zn)?;
        Ok(g.value(out).clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticNet {
    pub shape: CriticShape,
    /// conv1.w `[C1, 5, 4, 4]`, conv1.b, conv2.w `[C2, C1, 4, 4]`, conv2.b,
    /// head.w `[C2·(H/4)², 1]`, head.b.
    pub params: Vec<Tensor>,
}

impl CriticNet {
    pub const PARAM_NAMES: [&'static str; 6] =
        ["conv1.w", "conv1.b", "conv2.w", "conv2.b", "head.w", "head.b"];

    pub fn new(shape: CriticShape, seed: u64) -> Result<Self> {
        check_size(shape.image_size)?;
        let (c1, c2) = shape.channels;
        let s = shape.image_size / 4;
        let flat = c2 * s * s;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k2 = KERNEL * KERNEL;
        let params = vec![
            uniform(&mut rng, vec![c1, CHANNELS, KERNEL, KERNEL], CHANNELS * k2),
            Tensor::zeros(vec![c1]),
            uniform(&mut rng, vec![c2, c1, KERNEL, KERNEL], c1 * k2),
            Tensor::zeros(vec![c2]),
            uniform(&mut rng, vec![flat, 1], flat),
            Tensor::zeros(vec![1]),
        ];
        Ok(CriticNet { shape, params })
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<NodeId> {
        self.params
            .iter()
            .map(|p| g.leaf(p.clone(), trainable))
            .collect()
    }

    /// `x: [B, 5, H, W]` → `[B]`.
    pub fn forward(&self, g: &mut Graph, p: &[NodeId], x: NodeId) -> Result<NodeId> {
        let xs = g.shape(x).to_vec();
        let n = self.shape.image_size;
        if xs.len() != 4 || xs[1..] != [CHANNELS, n, n] {
            return Err(Error::shape(format!(
                "critic input {xs:?}, expected [B, {CHANNELS}, {n}, {n}]"
            )));
        }
        let b = xs[0];
        let h = g.conv2d(x, p[0], 2, 1)?;
        let h = g.add_bias(h, p[1])?;
        let h = g.leaky_relu(h, LEAK);
        let h = g.conv2d(h, p[2], 2, 1)?;
        let h = g.add_bias(h, p[3])?;
        let h = g.leaky_relu(h, LEAK);
        let flat = g.value(h).len() / b;
        let h = g.reshape(h, &[b, flat])?;
        let h = g.matmul(h, p[4])?;
        let h = g.add_bias(h, p[5])?;
        g.reshape(h, &[b])
    }

    pub fn score(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let xn = g.constant(x.clone());
        let out = self.forward(&mut g, &p, xn)?;
        Ok(g.value(out).clone())
    }

    /// Clamps every parameter into `[-c, c]`.
    pub fn clip_weights(&mut self, c: f64) -> Result<()> {
        if !(c > 0.0) {
            return Err(Error::invalid(format!("clip bound must be > 0, got {c}")));
        }
        for p in &mut self.params {
            for v in &mut p.data {
                *v = v.clamp(-c, c);
            }
        }
        Ok(())
    }
}

/// Anything usable as the critic `D` inside a recorded graph.
pub trait Critic {
    fn score(&self, g: &mut Graph, x: NodeId) -> Result<NodeId>;
}

/// A critic network together with its parameter nodes in a graph.
pub struct BoundCritic<'a> {
    pub net: &'a CriticNet,
    pub params: Vec<NodeId>,
}

impl Critic for BoundCritic<'_> {
    fn score(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        self.net.forward(g, &self.params, x)
    }
}

impl<F> Critic for F
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    fn score(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        self(g, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gen() -> GeneratorNet {
        GeneratorNet::new(
            GeneratorShape {
                n_z: 6,
                image_size: 8,
                channels: (4, 3),
            },
            1,
        )
        .unwrap()
    }

    #[test]
    fn generator_shape_range_and_determinism() {
        let g = gen();
        let z = Tensor::new(vec![3, 6], (0..18).map(|i| (i % 2) as f64).collect()).unwrap();
        let a = g.generate(&z).unwrap();
        assert_eq!(a.shape, vec![3, 5, 8, 8]);
        assert!(a.data.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(a, gen().generate(&z).unwrap());
    }

    #[test]
    fn generator_distinguishes_latents() {
        let g = gen();
        let z = Tensor::new(vec![2, 6], vec![0., 1., 0., 1., 1., 0., 0., 1., 0., 1., 1., 1.])
            .unwrap();
        let out = g.generate(&z).unwrap();
        let per = out.len() / 2;
        assert_ne!(&out.data[..per], &out.data[per..]);
    }

    #[test]
    fn generator_rejects_wrong_latent_width() {
        let z = Tensor::zeros(vec![2, 5]);
        assert!(matches!(gen().generate(&z), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn critic_shape_and_finiteness() {
        let d = CriticNet::new(
            CriticShape {
                image_size: 8,
                channels: (3, 4),
            },
            2,
        )
        .unwrap();
        let x = Tensor::new(vec![4, 5, 8, 8], (0..1280).map(|i| ((i * 37) % 100) as f64 / 50.0 - 1.0).collect())
            .unwrap();
        let s = d.score(&x).unwrap();
        assert_eq!(s.shape, vec![4]);
        assert!(s.data.iter().all(|v| v.is_finite()));
        assert_eq!(s, d.score(&x).unwrap());
        assert!(d.score(&Tensor::zeros(vec![1, 5, 12, 12])).is_err());
    }

    #[test]
    fn clipping() {
        let mut d = CriticNet::new(
            CriticShape {
                image_size: 8,
                channels: (2, 2),
            },
            0,
        )
        .unwrap();
        for p in &mut d.params {
            p.data.iter_mut().for_each(|v| *v = 0.9);
        }
        d.clip_weights(0.5).unwrap();
        assert!(d.params.iter().all(|p| p.data.iter().all(|&v| v == 0.5)));
        let before = d.clone();
        d.clip_weights(0.7).unwrap();
        assert_eq!(before, d);
        d.clip_weights(0.01).unwrap();
        let max = d
            .params
            .iter()
            .flat_map(|p| p.data.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert_eq!(max, 0.01);
        assert!(d.clip_weights(0.0).is_err());
        assert!(d.clip_weights(-1.0).is_err());
    }
}
