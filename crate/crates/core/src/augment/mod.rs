//! Distorted-view generation and the allocation of `2M` augmented batches
//! to `M` ensemble blocks.

mod image;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::seed::{derive_seed, stream};

pub use image::augment_image;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationSpec {
    /// Crop area as a fraction of the image area.
    pub crop_scale: (f64, f64),
    /// Crop width / height, sampled log-uniformly.
    pub aspect_ratio: (f64, f64),
    pub flip_prob: f64,
    pub jitter_enabled: bool,
    /// Brightness, contrast, saturation, hue.
    pub jitter: [f64; 4],
    /// Relative odds of color jitter versus grayscale.
    pub jitter_vs_gray_odds: [f64; 2],
    pub noise_sigma: f64,
    pub mask_prob: f64,
    pub seed: u64,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        AugmentationSpec {
            crop_scale: (0.2, 1.0),
            aspect_ratio: (0.75, 4.0 / 3.0),
            flip_prob: 0.5,
            jitter_enabled: true,
            jitter: [0.4, 0.4, 0.4, 0.1],
            jitter_vs_gray_odds: [8.0, 1.0],
            noise_sigma: 0.5,
            mask_prob: 0.2,
            seed: 0,
        }
    }
}

impl AugmentationSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("augmentation: {msg}")));
        let (s0, s1) = self.crop_scale;
        if !(s0 > 0.0 && s0 <= s1 && s1 <= 1.0) {
            return bad(format!("crop_scale {:?} must satisfy 0 < lo <= hi <= 1", self.crop_scale));
        }
        let (a0, a1) = self.aspect_ratio;
        if !(a0 > 0.0 && a0 <= a1 && a1.is_finite()) {
            return bad(format!("aspect_ratio {:?} must satisfy 0 < lo <= hi", self.aspect_ratio));
        }
        for (name, p) in [("flip_prob", self.flip_prob), ("mask_prob", self.mask_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} is not a probability"));
            }
        }
        if self.jitter.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || self.jitter[3] > 0.5 {
            return bad(format!("jitter {:?} out of range", self.jitter));
        }
        let [j, g] = self.jitter_vs_gray_odds;
        if !(j >= 0.0 && g >= 0.0 && j + g > 0.0) {
            return bad(format!("jitter_vs_gray_odds {:?} invalid", self.jitter_vs_gray_odds));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad(format!("noise_sigma = {} invalid", self.noise_sigma));
        }
        Ok(())
    }
}

/// Additive Gaussian noise, then independent masking of coordinates to zero.
pub fn augment_vector(x: &[f64], spec: &AugmentationSpec, rng: &mut impl Rng) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let noise: f64 = StandardNormal.sample(rng);
            let keep = !rng.random_bool(spec.mask_prob);
            if keep {
                v + spec.noise_sigma * noise
            } else {
                0.0
            }
        })
        .collect()
}

/// How the columns of a batch row are interpreted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputLayout {
    Vector,
    Image {
        channels: usize,
        height: usize,
        width: usize,
    },
}

impl InputLayout {
    pub fn row_len(&self, cols: usize) -> usize {
        match *self {
            InputLayout::Vector => cols,
            InputLayout::Image {
                channels,
                height,
                width,
            } => channels * height * width,
        }
    }
}

/// Augments every row of `batch` independently, drawing from one stream.
pub fn augment_batch(
    batch: &Tensor,
    layout: InputLayout,
    spec: &AugmentationSpec,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let cols = batch.cols();
    if layout.row_len(cols) != cols {
        return Err(Error::InvalidShape {
            shape: batch.shape().to_vec(),
            reason: format!("rows do not match layout {layout:?}"),
        });
    }
    let mut out = Vec::with_capacity(batch.len());
    for r in 0..batch.rows() {
        let row = batch.row_slice(r);
        match layout {
            InputLayout::Vector => out.extend(augment_vector(row, spec, rng)),
            InputLayout::Image {
                channels,
                height,
                width,
            } => {
                let img = Tensor::new([channels, height, width], row.to_vec())?;
                out.extend(augment_image(&img, spec, rng)?.into_data());
            }
        }
    }
    Tensor::matrix(batch.rows(), cols, out)
}

/// Seeds for one training step: one for the pairing permutation and one per
/// block for view content.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ViewStreams {
    pub permutation_seed: u64,
    pub block_seeds: Vec<u64>,
}

impl ViewStreams {
    /// Streams for `(epoch, step)` given each block's own seed.
    pub fn for_step(run_seed: u64, block_seeds: &[u64], epoch: u64, step: u64) -> Self {
        ViewStreams {
            permutation_seed: derive_seed(run_seed, "allocation", &[epoch, step]),
            block_seeds: block_seeds
                .iter()
                .map(|&s| derive_seed(s, "views", &[epoch, step]))
                .collect(),
        }
    }

    pub fn blocks(&self) -> usize {
        self.block_seeds.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewAllocation {
    pub blocks: usize,
    /// Batch ids delivered to block `k` as its view pair.
    pub pairs: Vec<[usize; 2]>,
    pub permutation_seed: u64,
    pub shared_views: bool,
}

impl ViewAllocation {
    pub fn new(blocks: usize, permutation_seed: u64, shared_views: bool) -> Result<Self> {
        if blocks == 0 {
            return Err(Error::Invalid("view allocation needs at least one block".into()));
        }
        let mut ids: Vec<usize> = (0..2 * blocks).collect();
        ids.shuffle(&mut stream(permutation_seed, "permutation", &[]));
        let pairs = ids.chunks(2).map(|p| [p[0], p[1]]).collect();
        Ok(ViewAllocation {
            blocks,
            pairs,
            permutation_seed,
            shared_views,
        })
    }

    pub fn batch_count(&self) -> usize {
        2 * self.blocks
    }

    /// Ordered batch ids block `k` trains on: its pair, or all `2M` when
    /// views are shared.
    pub fn batches_for(&self, block: usize) -> Vec<usize> {
        if self.shared_views {
            (0..self.batch_count()).collect()
        } else {
            self.pairs[block].to_vec()
        }
    }

    /// Block and slot whose stream generates batch `id`.
    fn producer(&self, id: usize) -> (usize, usize) {
        for (k, pair) in self.pairs.iter().enumerate() {
            if let Some(s) = pair.iter().position(|&b| b == id) {
                return (k, s);
            }
        }
        unreachable!("allocation is a permutation")
    }
}

/// One step's augmented batches together with their allocation.
#[derive(Clone, Debug)]
pub struct AllocatedViews {
    pub allocation: ViewAllocation,
    /// Indexed by batch id.
    pub batches: Vec<Tensor>,
}

impl AllocatedViews {
    pub fn for_block(&self, block: usize) -> Vec<&Tensor> {
        self.allocation
            .batches_for(block)
            .into_iter()
            .map(|id| &self.batches[id])
            .collect()
    }
}

fn generate_slot(
    batch: &Tensor,
    layout: InputLayout,
    spec: &AugmentationSpec,
    streams: &ViewStreams,
    block: usize,
    slot: usize,
) -> Result<Tensor> {
    let mut rng = stream(streams.block_seeds[block], "slot", &[spec.seed, slot as u64]);
    augment_batch(batch, layout, spec, &mut rng)
}

/// Produces `2M` augmented copies of `batch` and pairs them off across the
/// blocks. Batch content is drawn from the stream of the block it is
/// allocated to, so one block's seed never affects another block's views.
pub fn generate_and_allocate(
    batch: &Tensor,
    layout: InputLayout,
    spec: &AugmentationSpec,
    streams: &ViewStreams,
    shared_views: bool,
) -> Result<AllocatedViews> {
    let allocation = ViewAllocation::new(streams.blocks(), streams.permutation_seed, shared_views)?;
    let batches = (0..allocation.batch_count())
        .map(|id| {
            let (k, s) = allocation.producer(id);
            generate_slot(batch, layout, spec, streams, k, s)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AllocatedViews {
        allocation,
        batches,
    })
}

/// The batches block `k` receives at this step, generating only what that
/// block needs. Equal to `generate_and_allocate(..).for_block(k)`.
pub fn views_for_block(
    batch: &Tensor,
    layout: InputLayout,
    spec: &AugmentationSpec,
    streams: &ViewStreams,
    shared_views: bool,
    block: usize,
) -> Result<Vec<Tensor>> {
    if shared_views {
        let all = generate_and_allocate(batch, layout, spec, streams, true)?;
        return Ok(all.batches);
    }
    (0..2)
        .map(|s| generate_slot(batch, layout, spec, streams, block, s))
        .collect()
}
