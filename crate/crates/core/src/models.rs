//! The three networks: a residual encoder-decoder generator, a 70×70 patch
//! discriminator whose sigmoid output is the score map, and a global reviser.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{dropout, BatchNorm2d, Conv2d, ConvTranspose2d, ParamStore, Pass};
use crate::region_proposal::ScoreMap;
use crate::tensor::{conv_out_len, Scalar, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;

/// Anything with a parameter store and a stable architecture description.
pub trait Network<T: Scalar> {
    fn store(&self) -> &ParamStore<T>;
    fn store_mut(&mut self) -> &mut ParamStore<T>;
    /// Canonical JSON of the architecture spec.
    fn spec_json(&self) -> String;

    /// SHA-256 of the architecture spec, hex encoded.
    fn spec_hash(&self) -> String {
        let digest = Sha256::digest(self.spec_json().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_width: usize,
    pub residual_blocks: usize,
    /// Dropout probability inside residual blocks; the noise source `z`.
    pub dropout: f64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            in_channels: 3,
            out_channels: 3,
            base_width: 64,
            residual_blocks: 9,
            dropout: 0.5,
        }
    }
}

/// Two stride-2 stages down, two fractionally strided stages up.
pub const GENERATOR_STAGES: usize = 2;

struct ResidualBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
}

pub struct Generator<T> {
    pub spec: GeneratorSpec,
    store: ParamStore<T>,
    stem: (Conv2d, BatchNorm2d),
    down: Vec<(Conv2d, BatchNorm2d)>,
    blocks: Vec<ResidualBlock>,
    up: Vec<(ConvTranspose2d, BatchNorm2d)>,
    head: Conv2d,
}

impl<T: Scalar> Generator<T> {
    pub fn new(spec: GeneratorSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let w = spec.base_width;
        let stem = (
            Conv2d::new(&mut store, "stem", spec.in_channels, w, 7, 1, 3, false, &mut rng),
            BatchNorm2d::new(&mut store, "stem.bn", w, &mut rng),
        );
        let down = (0..GENERATOR_STAGES)
            .map(|i| {
                let (cin, cout) = (w << i, w << (i + 1));
                (
                    Conv2d::new(&mut store, &format!("down{i}"), cin, cout, 3, 2, 1, false, &mut rng),
                    BatchNorm2d::new(&mut store, &format!("down{i}.bn"), cout, &mut rng),
                )
            })
            .collect();
        let inner = w << GENERATOR_STAGES;
        let blocks = (0..spec.residual_blocks)
            .map(|i| ResidualBlock {
                conv1: Conv2d::new(&mut store, &format!("res{i}.conv1"), inner, inner, 3, 1, 1, false, &mut rng),
                bn1: BatchNorm2d::new(&mut store, &format!("res{i}.bn1"), inner, &mut rng),
                conv2: Conv2d::new(&mut store, &format!("res{i}.conv2"), inner, inner, 3, 1, 1, false, &mut rng),
                bn2: BatchNorm2d::new(&mut store, &format!("res{i}.bn2"), inner, &mut rng),
            })
            .collect();
        let up = (0..GENERATOR_STAGES)
            .map(|i| {
                let (cin, cout) = (inner >> i, inner >> (i + 1));
                (
                    ConvTranspose2d::new(&mut store, &format!("up{i}"), cin, cout, 3, 2, 1, 1, false, &mut rng),
                    BatchNorm2d::new(&mut store, &format!("up{i}.bn"), cout, &mut rng),
                )
            })
            .collect();
        let head = Conv2d::new(&mut store, "head", w, spec.out_channels, 7, 1, 3, true, &mut rng);
        Generator {
            spec,
            store,
            stem,
            down,
            blocks,
            up,
            head,
        }
    }

    pub fn forward(&self, pass: &mut Pass<T>, x: &Var<T>) -> Result<Var<T>> {
        let shape = x.shape();
        let factor = 1 << GENERATOR_STAGES;
        if shape.len() != 4 || !shape[2].is_multiple_of(factor) || !shape[3].is_multiple_of(factor) || shape[2] == 0 {
            return Err(Error::Shape(format!(
                "generator input {shape:?} must be (N, C, H, W) with H and W divisible by {factor}"
            )));
        }
        let mut h = self.stem.1.forward(pass, &self.stem.0.forward(pass, x)?)?.relu();
        for (conv, bn) in &self.down {
            h = bn.forward(pass, &conv.forward(pass, &h)?)?.relu();
        }
        for b in &self.blocks {
            let r = b.bn1.forward(pass, &b.conv1.forward(pass, &h)?)?.relu();
            let r = dropout(pass, &r, self.spec.dropout);
            let r = b.bn2.forward(pass, &b.conv2.forward(pass, &r)?)?;
            h = h.add(&r);
        }
        for (conv, bn) in &self.up {
            h = bn.forward(pass, &conv.forward(pass, &h)?)?.relu();
        }
        Ok(self.head.forward(pass, &h)?.tanh())
    }

    /// Inference without gradients. `noise_seed` drives dropout when `train` is set.
    pub fn generate(&mut self, x: &Tensor<T>, noise_seed: u64, train: bool) -> Result<Tensor<T>> {
        let mut pass = self
            .store
            .bind(false, train)
            .with_dropout(ChaCha8Rng::seed_from_u64(noise_seed));
        let y = self.forward(&mut pass, &Var::constant(x.clone()))?;
        Ok(y.value().clone())
    }
}

impl<T: Scalar> Network<T> for Generator<T> {
    fn store(&self) -> &ParamStore<T> {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }
    fn spec_json(&self) -> String {
        serde_json::to_string(&self.spec).expect("spec serializes")
    }
}

/// Zero padding of the patch discriminator's convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatchPadding {
    /// One pixel on every layer: 256 → 30×30 cells, and small inputs still yield a map.
    Same,
    /// No padding: each cell sees exactly one 70×70 patch, so 70 → 1×1.
    Valid,
}

impl PatchPadding {
    fn pixels(self) -> usize {
        match self {
            PatchPadding::Same => 1,
            PatchPadding::Valid => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchDiscriminatorSpec {
    /// Channels of one image; the network sees condition and candidate concatenated.
    pub in_channels: usize,
    pub base_width: usize,
    pub padding: PatchPadding,
}

impl Default for PatchDiscriminatorSpec {
    fn default() -> Self {
        PatchDiscriminatorSpec {
            in_channels: 3,
            base_width: 64,
            padding: PatchPadding::Same,
        }
    }
}

pub const PATCH_KERNEL: usize = 4;
/// Width multiplier and stride per layer; the last layer maps to one channel.
pub const PATCH_LAYERS: [(usize, usize); 5] = [(1, 2), (2, 2), (4, 2), (8, 1), (0, 1)];

impl PatchDiscriminatorSpec {
    /// Score-map side for a square input, if the input is large enough.
    pub fn scoremap_size(&self, image_size: usize) -> Option<usize> {
        PATCH_LAYERS.iter().try_fold(image_size, |len, &(_, stride)| {
            conv_out_len(len, PATCH_KERNEL, stride, self.padding.pixels()).filter(|&l| l > 0)
        })
    }

    /// Input pixels seen by one output cell.
    pub fn receptive_field(&self) -> usize {
        PATCH_LAYERS
            .iter()
            .rev()
            .fold(1, |rf, &(_, stride)| (rf - 1) * stride + PATCH_KERNEL)
    }
}

pub struct PatchDiscriminator<T> {
    pub spec: PatchDiscriminatorSpec,
    store: ParamStore<T>,
    layers: Vec<(Conv2d, Option<BatchNorm2d>)>,
}

impl<T: Scalar> PatchDiscriminator<T> {
    pub fn new(spec: PatchDiscriminatorSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let pad = spec.padding.pixels();
        let mut cin = 2 * spec.in_channels;
        let last = PATCH_LAYERS.len() - 1;
        let layers = PATCH_LAYERS
            .iter()
            .enumerate()
            .map(|(i, &(mult, stride))| {
                let cout = if i == last { 1 } else { spec.base_width * mult };
                let norm = i != 0 && i != last;
                let conv = Conv2d::new(
                    &mut store,
                    &format!("conv{i}"),
                    cin,
                    cout,
                    PATCH_KERNEL,
                    stride,
                    pad,
                    !norm,
                    &mut rng,
                );
                let bn = norm.then(|| BatchNorm2d::new(&mut store, &format!("conv{i}.bn"), cout, &mut rng));
                cin = cout;
                (conv, bn)
            })
            .collect();
        PatchDiscriminator {
            spec,
            store,
            layers,
        }
    }

    /// `(N, 1, s, s)` probabilities for the pair `(x, candidate)`.
    pub fn forward(&self, pass: &mut Pass<T>, x: &Var<T>, candidate: &Var<T>) -> Result<Var<T>> {
        check_pair(x, candidate)?;
        if x.shape()[2] != x.shape()[3] || self.spec.scoremap_size(x.shape()[2]).is_none() {
            return Err(Error::Shape(format!(
                "{}x{} input is too small for the patch discriminator",
                x.shape()[2],
                x.shape()[3]
            )));
        }
        let mut h = Var::concat(&[x.clone(), candidate.clone()], 1);
        let last = self.layers.len() - 1;
        for (i, (conv, bn)) in self.layers.iter().enumerate() {
            h = conv.forward(pass, &h)?;
            if let Some(bn) = bn {
                h = bn.forward(pass, &h)?;
            }
            h = if i == last {
                h.sigmoid()
            } else {
                h.leaky_relu(T::from_f64(LEAKY_SLOPE))
            };
        }
        Ok(h)
    }

    /// Score maps without gradients, in eval mode.
    pub fn score_patches(&self, x: &Tensor<T>, candidate: &Tensor<T>) -> Result<Vec<ScoreMap>> {
        let mut pass = self.store.bind(false, false);
        let s = self.forward(&mut pass, &Var::constant(x.clone()), &Var::constant(candidate.clone()))?;
        ScoreMap::from_batch(s.value(), x.shape()[2])
    }
}

impl<T: Scalar> Network<T> for PatchDiscriminator<T> {
    fn store(&self) -> &ParamStore<T> {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }
    fn spec_json(&self) -> String {
        serde_json::to_string(&self.spec).expect("spec serializes")
    }
}

fn check_pair<T: Scalar>(x: &Var<T>, candidate: &Var<T>) -> Result<()> {
    let (a, b) = (x.shape(), candidate.shape());
    if a.len() != 4 || b.len() != 4 || a[0] != b[0] || a[2..] != b[2..] {
        return Err(Error::Shape(format!("condition {a:?} vs candidate {b:?}")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReviserSpec {
    pub in_channels: usize,
    pub base_width: usize,
    /// Training resolution; must be `4 · 2^k`.
    pub resolution: usize,
}

impl ReviserSpec {
    /// Stride-2 stages needed to reach a 4×4 feature map.
    pub fn stages(&self) -> Result<usize> {
        let r = self.resolution;
        if r < 8 || !r.is_multiple_of(4) || !(r / 4).is_power_of_two() {
            return Err(Error::Config(format!(
                "reviser resolution {r} must be 4 * 2^k with k >= 1"
            )));
        }
        Ok((r / 4).trailing_zeros() as usize)
    }
}

pub struct Reviser<T> {
    pub spec: ReviserSpec,
    store: ParamStore<T>,
    stages: Vec<(Conv2d, Option<BatchNorm2d>)>,
    head: Conv2d,
}

impl<T: Scalar> Reviser<T> {
    pub fn new(spec: ReviserSpec, seed: u64) -> Result<Self> {
        let n = spec.stages()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut cin = 2 * spec.in_channels;
        let stages = (0..n)
            .map(|i| {
                let cout = spec.base_width << i.min(3);
                let conv = Conv2d::new(&mut store, &format!("conv{i}"), cin, cout, 4, 2, 1, i == 0, &mut rng);
                let bn = (i != 0).then(|| BatchNorm2d::new(&mut store, &format!("conv{i}.bn"), cout, &mut rng));
                cin = cout;
                (conv, bn)
            })
            .collect();
        let head = Conv2d::new(&mut store, "head", cin, 1, 4, 1, 0, true, &mut rng);
        Ok(Reviser {
            spec,
            store,
            stages,
            head,
        })
    }

    /// `(N, 1, 1, 1)` probability that each pair is real.
    pub fn forward(&self, pass: &mut Pass<T>, x: &Var<T>, candidate: &Var<T>) -> Result<Var<T>> {
        check_pair(x, candidate)?;
        let r = self.spec.resolution;
        if x.shape()[2] != r || x.shape()[3] != r {
            return Err(Error::Shape(format!(
                "reviser trained at {r}x{r}, got {}x{}",
                x.shape()[2],
                x.shape()[3]
            )));
        }
        let mut h = Var::concat(&[x.clone(), candidate.clone()], 1);
        for (conv, bn) in &self.stages {
            h = conv.forward(pass, &h)?;
            if let Some(bn) = bn {
                h = bn.forward(pass, &h)?;
            }
            h = h.leaky_relu(T::from_f64(LEAKY_SLOPE));
        }
        Ok(self.head.forward(pass, &h)?.sigmoid())
    }

    /// Per-sample probabilities without gradients, in eval mode.
    pub fn revise_score(&self, x: &Tensor<T>, candidate: &Tensor<T>) -> Result<Vec<f64>> {
        let mut pass = self.store.bind(false, false);
        let p = self.forward(&mut pass, &Var::constant(x.clone()), &Var::constant(candidate.clone()))?;
        Ok(p.value().data().iter().map(|v| v.to_f64()).collect())
    }
}

impl<T: Scalar> Network<T> for Reviser<T> {
    fn store(&self) -> &ParamStore<T> {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }
    fn spec_json(&self) -> String {
        serde_json::to_string(&self.spec).expect("spec serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::grad;
    use crate::nn::normal_tensor;

    fn rand_batch<T: Scalar>(shape: &[usize], seed: u64) -> Tensor<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        normal_tensor::<T>(shape, 0.0, 0.5, &mut rng).map(|v| v.tanh())
    }

    fn small_gen() -> GeneratorSpec {
        GeneratorSpec {
            base_width: 4,
            residual_blocks: 2,
            ..GeneratorSpec::default()
        }
    }

    #[test]
    fn generator_preserves_spatial_size_and_range() {
        let mut g = Generator::<f32>::new(small_gen(), 0);
        let x = rand_batch::<f32>(&[1, 3, 64, 64], 1);
        let y = g.generate(&x, 0, true).unwrap();
        assert_eq!(y.shape(), &[1, 3, 64, 64]);
        assert!(y.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn generator_rejects_indivisible_size() {
        let mut g = Generator::<f32>::new(small_gen(), 0);
        assert!(g.generate(&Tensor::zeros(&[1, 3, 30, 30]), 0, false).is_err());
    }

    #[test]
    fn generator_is_deterministic_per_noise_seed() {
        let mut g = Generator::<f32>::new(small_gen(), 7);
        let x = rand_batch::<f32>(&[2, 3, 16, 16], 2);
        let a = g.generate(&x, 11, true).unwrap();
        let b = g.generate(&x, 11, true).unwrap();
        let c = g.generate(&x, 12, true).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn generator_has_nine_residual_blocks_by_default() {
        let g = Generator::<f32>::new(GeneratorSpec { base_width: 2, ..Default::default() }, 0);
        let convs = g
            .store()
            .entries()
            .iter()
            .filter(|e| e.name.starts_with("res") && e.name.ends_with("conv1.weight"))
            .count();
        assert_eq!(convs, 9);
        let again = Generator::<f32>::new(GeneratorSpec { base_width: 2, ..Default::default() }, 0);
        assert_eq!(g.store().parameter_count(), again.store().parameter_count());
        assert_eq!(g.spec_hash(), again.spec_hash());
    }

    #[test]
    fn patch_layer_arithmetic() {
        let same = PatchDiscriminatorSpec::default();
        let valid = PatchDiscriminatorSpec {
            padding: PatchPadding::Valid,
            ..Default::default()
        };
        assert_eq!(same.receptive_field(), 70);
        assert_eq!(valid.receptive_field(), 70);
        // padded: 256 -> 128 -> 64 -> 32 -> 31 -> 30
        assert_eq!(same.scoremap_size(256), Some(30));
        assert_eq!(same.scoremap_size(64), Some(6));
        // unpadded: 70 -> 34 -> 16 -> 7 -> 4 -> 1; 256 -> 127 -> 62 -> 30 -> 27 -> 24
        assert_eq!(valid.scoremap_size(70), Some(1));
        assert_eq!(valid.scoremap_size(256), Some(24));
        assert_eq!(valid.scoremap_size(69), None);
    }

    #[test]
    fn patch_scores_are_probabilities_of_predicted_size() {
        let d = PatchDiscriminator::<f64>::new(
            PatchDiscriminatorSpec {
                base_width: 4,
                ..Default::default()
            },
            3,
        );
        let x = rand_batch::<f64>(&[2, 3, 64, 64], 4);
        let y = rand_batch::<f64>(&[2, 3, 64, 64], 5);
        let maps = d.score_patches(&x, &y).unwrap();
        assert_eq!(maps.len(), 2);
        assert_eq!(maps[0].size(), 6);
        assert!(maps.iter().flat_map(|m| m.values()).all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn patch_discriminator_rejects_small_input() {
        let d = PatchDiscriminator::<f32>::new(
            PatchDiscriminatorSpec {
                base_width: 2,
                padding: PatchPadding::Valid,
                ..Default::default()
            },
            0,
        );
        let x = Tensor::zeros(&[1, 3, 64, 64]);
        assert!(d.score_patches(&x, &x).is_err());
    }

    #[test]
    fn reviser_outputs_one_probability_per_sample() {
        let r = Reviser::<f64>::new(
            ReviserSpec {
                in_channels: 3,
                base_width: 4,
                resolution: 32,
            },
            0,
        )
        .unwrap();
        let x = rand_batch::<f64>(&[4, 3, 32, 32], 1);
        let y = rand_batch::<f64>(&[4, 3, 32, 32], 2);
        let p = r.revise_score(&x, &y).unwrap();
        assert_eq!(p.len(), 4);
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(p, r.revise_score(&x, &y).unwrap());
        assert!(r.revise_score(&Tensor::zeros(&[1, 3, 16, 16]), &Tensor::zeros(&[1, 3, 16, 16])).is_err());
    }

    #[test]
    fn reviser_depth_follows_resolution() {
        let spec = |r| ReviserSpec {
            in_channels: 3,
            base_width: 8,
            resolution: r,
        };
        assert_eq!(spec(8).stages().unwrap(), 1);
        assert_eq!(spec(64).stages().unwrap(), 4);
        assert_eq!(spec(256).stages().unwrap(), 6);
        assert!(spec(96).stages().is_err());
        assert!(spec(4).stages().is_err());
    }

    #[test]
    fn reviser_candidate_gradient_matches_finite_differences() {
        let r = Reviser::<f64>::new(
            ReviserSpec {
                in_channels: 1,
                base_width: 2,
                resolution: 8,
            },
            9,
        )
        .unwrap();
        let x = rand_batch::<f64>(&[1, 1, 8, 8], 3);
        let y = rand_batch::<f64>(&[1, 1, 8, 8], 4);
        let score = |cand: &Tensor<f64>| -> f64 {
            let mut pass = r.store().bind(false, false);
            r.forward(&mut pass, &Var::constant(x.clone()), &Var::constant(cand.clone()))
                .unwrap()
                .item()
        };
        let leaf = Var::leaf(y.clone());
        let mut pass = r.store().bind(false, false);
        let out = r.forward(&mut pass, &Var::constant(x.clone()), &leaf).unwrap().sum_all();
        let g = grad(&out, &[&leaf], false).remove(0);
        assert!(g.value().all_finite());
        for i in [0, 9, 27, 63] {
            let h = 1e-6;
            let (mut p, mut m) = (y.clone(), y.clone());
            p.data_mut()[i] += h;
            m.data_mut()[i] -= h;
            let num = (score(&p) - score(&m)) / (2.0 * h);
            let ana = g.value().data()[i];
            assert!((num - ana).abs() <= 1e-6 * (1.0 + num.abs()), "{num} vs {ana}");
        }
    }
}
