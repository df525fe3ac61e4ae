//! Convolutional backbone in two trims.
//!
//! [`FeatureMapEncoder`] keeps spatial structure (three blocks, 8x
//! downsampling) and feeds the region proposal head. [`EmbeddingEncoder`]
//! adds a fourth block and global average pooling to produce one vector per
//! image for prototype classification. Both consume RGB images in `[0, 1]`
//! plus, for four-channel classifiers, a soft localization mask appended as
//! an extra input channel.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayView3, ArrayViewD, ArrayViewMutD, Ix2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ops::{
    global_avg_pool, global_avg_pool_backward, max_pool2, max_pool2_backward, reflect_pad_to_multiple,
    relu, relu_backward, PoolCache,
};
use crate::nn::{Conv2d, ConvCache, GradStore, InstanceNorm, NormCache};
use crate::{cf, Scalar};

/// Parameters per conv block: kernel, bias, norm gain, norm shift.
pub const PARAMS_PER_BLOCK: usize = 4;

/// Per-channel statistics of the training images, applied as `(x - mean) /
/// std` before the network. The mask channel is never standardized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl ChannelStats {
    pub fn identity() -> Self {
        ChannelStats {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

/// Architecture description, serialized into checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_channels: usize,
    pub widths: Vec<usize>,
    pub stats: ChannelStats,
}

impl EncoderConfig {
    pub fn embedding_default(input_channels: usize, stats: ChannelStats) -> Self {
        EncoderConfig {
            input_channels,
            widths: vec![32, 64, 128, 256],
            stats,
        }
    }

    pub fn feature_map_default(stats: ChannelStats) -> Self {
        EncoderConfig {
            input_channels: 3,
            widths: vec![32, 64, 128],
            stats,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(Error::Config("encoder needs at least one block".into()));
        }
        if self.input_channels != 3 && self.input_channels != 4 {
            return Err(Error::Config(format!(
                "input_channels must be 3 or 4, got {}",
                self.input_channels
            )));
        }
        Ok(())
    }
}

/// conv -> instance norm -> relu -> 2x max pool
#[derive(Debug, Clone)]
struct ConvBlock<F> {
    conv: Conv2d<F>,
    norm: InstanceNorm<F>,
}

struct BlockCache<F> {
    conv: ConvCache<F>,
    norm: NormCache<F>,
    relu_out: Array3<F>,
    pool: PoolCache,
}

impl<F: Scalar> ConvBlock<F> {
    fn init<R: Rng>(c_in: usize, c_out: usize, rng: &mut R) -> Self
    where
        StandardNormal: Distribution<F>,
    {
        ConvBlock {
            conv: Conv2d::he_init(c_in, c_out, rng),
            norm: InstanceNorm::new(c_out),
        }
    }

    fn forward(&self, x: ArrayView3<F>) -> (Array3<F>, BlockCache<F>) {
        let (t1, conv_cache) = self.conv.forward(x);
        let (mut t2, norm_cache) = self.norm.forward(t1.view());
        relu(&mut t2);
        let (out, pool_cache) = max_pool2(t2.view());
        (
            out,
            BlockCache {
                conv: conv_cache,
                norm: norm_cache,
                relu_out: t2,
                pool: pool_cache,
            },
        )
    }

    fn infer(&self, x: ArrayView3<F>) -> Array3<F> {
        let t1 = self.conv.infer(x);
        let (mut t2, _) = self.norm.forward(t1.view());
        relu(&mut t2);
        max_pool2(t2.view()).0
    }

    /// `slots` are this block's four gradient arrays in canonical order.
    fn backward(
        &self,
        cache: &BlockCache<F>,
        dout: ArrayView3<F>,
        slots: &mut [ndarray::ArrayD<F>],
        need_dinput: bool,
    ) -> Option<Array3<F>> {
        let dt2 = max_pool2_backward(&cache.pool, dout);
        let dt2 = relu_backward(dt2.view(), cache.relu_out.view());
        let (dgamma, dbeta) = {
            let (a, b) = slots.split_at_mut(3);
            (&mut a[2], &mut b[0])
        };
        let dt1 = self.norm.backward(
            &cache.norm,
            dt2.view(),
            dgamma
                .view_mut()
                .into_dimensionality()
                .expect("gamma grad rank"),
            dbeta
                .view_mut()
                .into_dimensionality()
                .expect("beta grad rank"),
        );
        let (dw, db) = {
            let (a, b) = slots.split_at_mut(1);
            (&mut a[0], &mut b[0])
        };
        self.conv.backward(
            &cache.conv,
            dt1.view(),
            dw.view_mut().into_dimensionality::<Ix2>().expect("weight grad rank"),
            db.view_mut().into_dimensionality().expect("bias grad rank"),
            need_dinput,
        )
    }

    fn param_shapes(&self) -> [Vec<usize>; PARAMS_PER_BLOCK] {
        [
            self.conv.weight.shape().to_vec(),
            self.conv.bias.shape().to_vec(),
            self.norm.gamma.shape().to_vec(),
            self.norm.beta.shape().to_vec(),
        ]
    }
}

macro_rules! impl_encoder_common {
    ($ty:ident) => {
        impl<F: Scalar> $ty<F> {
            pub fn config(&self) -> &EncoderConfig {
                &self.config
            }

            /// Total spatial downsampling applied by the conv blocks.
            pub fn factor(&self) -> usize {
                1 << self.blocks.len()
            }

            pub fn param_shapes(&self) -> Vec<Vec<usize>> {
                self.blocks
                    .iter()
                    .flat_map(|b| b.param_shapes().into_iter())
                    .collect()
            }

            pub fn grad_store(&self) -> GradStore<F> {
                GradStore::zeros_like(&self.param_shapes())
            }

            pub fn param_names(&self) -> Vec<String> {
                let mut names = Vec::new();
                for i in 0..self.blocks.len() {
                    names.push(format!("block{i}.conv.weight"));
                    names.push(format!("block{i}.conv.bias"));
                    names.push(format!("block{i}.norm.gamma"));
                    names.push(format!("block{i}.norm.beta"));
                }
                names
            }

            pub fn for_each_param(&self, mut f: impl FnMut(usize, &str, ArrayViewD<F>)) {
                for (i, b) in self.blocks.iter().enumerate() {
                    let base = i * PARAMS_PER_BLOCK;
                    f(base, &format!("block{i}.conv.weight"), b.conv.weight.view().into_dyn());
                    f(base + 1, &format!("block{i}.conv.bias"), b.conv.bias.view().into_dyn());
                    f(base + 2, &format!("block{i}.norm.gamma"), b.norm.gamma.view().into_dyn());
                    f(base + 3, &format!("block{i}.norm.beta"), b.norm.beta.view().into_dyn());
                }
            }

            pub fn for_each_param_mut(&mut self, mut f: impl FnMut(usize, &str, ArrayViewMutD<F>)) {
                for (i, b) in self.blocks.iter_mut().enumerate() {
                    let base = i * PARAMS_PER_BLOCK;
                    f(base, &format!("block{i}.conv.weight"), b.conv.weight.view_mut().into_dyn());
                    f(base + 1, &format!("block{i}.conv.bias"), b.conv.bias.view_mut().into_dyn());
                    f(base + 2, &format!("block{i}.norm.gamma"), b.norm.gamma.view_mut().into_dyn());
                    f(base + 3, &format!("block{i}.norm.beta"), b.norm.beta.view_mut().into_dyn());
                }
            }

            /// Mutable parameter views in canonical slot order, for the
            /// optimizer.
            pub fn param_views_mut(&mut self) -> Vec<ArrayViewMutD<'_, F>> {
                self.blocks
                    .iter_mut()
                    .flat_map(|b| {
                        [
                            b.conv.weight.view_mut().into_dyn(),
                            b.conv.bias.view_mut().into_dyn(),
                            b.norm.gamma.view_mut().into_dyn(),
                            b.norm.beta.view_mut().into_dyn(),
                        ]
                    })
                    .collect()
            }

            /// Copies all parameters out, for best-checkpoint tracking.
            pub fn snapshot_params(&self) -> Vec<ndarray::ArrayD<F>> {
                let mut out = Vec::new();
                self.for_each_param(|_, _, v| out.push(v.to_owned()));
                out
            }

            /// Restores parameters captured by [`Self::snapshot_params`].
            pub fn restore_params(&mut self, snapshot: &[ndarray::ArrayD<F>]) {
                self.for_each_param_mut(|slot, _, mut v| v.assign(&snapshot[slot]));
            }

            /// Standardizes RGB channels, appends the mask channel when the
            /// architecture expects one, and reflect-pads to the pooling
            /// granularity.
            fn prepare_input(
                &self,
                image: ArrayView3<F>,
                mask: Option<ArrayView2<F>>,
            ) -> Result<Array3<F>> {
                let (c, h, w) = image.dim();
                if c != 3 {
                    return Err(Error::Shape(format!("expected 3 image channels, got {c}")));
                }
                if h == 0 || w == 0 {
                    return Err(Error::Shape("empty image".into()));
                }
                let want_mask = self.config.input_channels == 4;
                let x = match (want_mask, mask) {
                    (false, None) => {
                        let mut x = Array3::zeros((3, h, w));
                        self.standardize_into(&image, &mut x);
                        x
                    }
                    (true, Some(m)) => {
                        if m.dim() != (h, w) {
                            return Err(Error::Shape(format!(
                                "mask {:?} does not match image {}x{}",
                                m.dim(),
                                h,
                                w
                            )));
                        }
                        let mut x = Array3::zeros((4, h, w));
                        self.standardize_into(&image, &mut x);
                        x.slice_mut(s![3, .., ..]).assign(&m);
                        x
                    }
                    (true, None) => {
                        return Err(Error::InvalidArgument(
                            "mask-conditioned encoder needs a mask channel".into(),
                        ))
                    }
                    (false, Some(_)) => {
                        return Err(Error::InvalidArgument(
                            "plain encoder does not accept a mask channel".into(),
                        ))
                    }
                };
                Ok(reflect_pad_to_multiple(x.view(), self.factor()))
            }

            fn standardize_into(&self, image: &ArrayView3<F>, x: &mut Array3<F>) {
                let stats = &self.config.stats;
                for ci in 0..3 {
                    let mean = cf::<F>(stats.mean[ci]);
                    let inv = cf::<F>(1.0 / stats.std[ci]);
                    let src = image.index_axis(ndarray::Axis(0), ci);
                    let mut dst = x.slice_mut(s![ci, .., ..]);
                    dst.assign(&src);
                    dst.mapv_inplace(|v| (v - mean) * inv);
                }
            }
        }
    };
}

/// Backbone trimmed after its third block: preserves an 8x-downsampled
/// spatial grid of descriptors for mask pooling and similarity scoring.
#[derive(Debug, Clone)]
pub struct FeatureMapEncoder<F> {
    config: EncoderConfig,
    blocks: Vec<ConvBlock<F>>,
}

/// Full backbone with global average pooling: one vector per image.
#[derive(Debug, Clone)]
pub struct EmbeddingEncoder<F> {
    config: EncoderConfig,
    blocks: Vec<ConvBlock<F>>,
}

impl_encoder_common!(FeatureMapEncoder);
impl_encoder_common!(EmbeddingEncoder);

fn init_blocks<F: Scalar, R: Rng>(config: &EncoderConfig, rng: &mut R) -> Vec<ConvBlock<F>>
where
    StandardNormal: Distribution<F>,
{
    let mut blocks = Vec::with_capacity(config.widths.len());
    let mut c_in = config.input_channels;
    for &c_out in &config.widths {
        blocks.push(ConvBlock::init(c_in, c_out, rng));
        c_in = c_out;
    }
    blocks
}

pub struct FeatureMapCache<F> {
    blocks: Vec<BlockCache<F>>,
}

impl<F: Scalar> FeatureMapEncoder<F> {
    pub fn init<R: Rng>(config: EncoderConfig, rng: &mut R) -> Result<Self>
    where
        StandardNormal: Distribution<F>,
    {
        config.validate()?;
        if config.input_channels != 3 {
            return Err(Error::Config(
                "feature map encoder takes plain RGB input".into(),
            ));
        }
        let blocks = init_blocks(&config, rng);
        Ok(FeatureMapEncoder { config, blocks })
    }

    /// Descriptor dimension of each spatial cell.
    pub fn feature_dim(&self) -> usize {
        *self.config.widths.last().unwrap()
    }

    /// `(d, ceil(h/factor), ceil(w/factor))` feature grid.
    pub fn feature_map(&self, image: ArrayView3<F>) -> Result<Array3<F>> {
        let mut x = self.prepare_input(image, None)?;
        for b in &self.blocks {
            x = b.infer(x.view());
        }
        Ok(x)
    }

    pub fn feature_map_with_cache(
        &self,
        image: ArrayView3<F>,
    ) -> Result<(Array3<F>, FeatureMapCache<F>)> {
        let mut x = self.prepare_input(image, None)?;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (nx, cache) = b.forward(x.view());
            caches.push(cache);
            x = nx;
        }
        Ok((x, FeatureMapCache { blocks: caches }))
    }

    /// Accumulates parameter gradients from a feature-map gradient.
    pub fn backward(
        &self,
        cache: &FeatureMapCache<F>,
        dfmap: ArrayView3<F>,
        grads: &mut GradStore<F>,
    ) {
        let mut dx = dfmap.to_owned();
        for i in (0..self.blocks.len()).rev() {
            let slots = &mut grads.0[i * PARAMS_PER_BLOCK..(i + 1) * PARAMS_PER_BLOCK];
            let next = self.blocks[i].backward(&cache.blocks[i], dx.view(), slots, i > 0);
            match next {
                Some(d) => dx = d,
                None => break,
            }
        }
    }
}

pub struct EmbedCache<F> {
    blocks: Vec<BlockCache<F>>,
    pre_pool_dims: (usize, usize, usize),
}

impl<F: Scalar> EmbeddingEncoder<F> {
    pub fn init<R: Rng>(config: EncoderConfig, rng: &mut R) -> Result<Self>
    where
        StandardNormal: Distribution<F>,
    {
        config.validate()?;
        let blocks = init_blocks(&config, rng);
        Ok(EmbeddingEncoder { config, blocks })
    }

    pub fn embedding_dim(&self) -> usize {
        *self.config.widths.last().unwrap()
    }

    pub fn accepts_mask(&self) -> bool {
        self.config.input_channels == 4
    }

    /// Widens a plain RGB encoder to accept a mask channel. RGB kernels are
    /// copied; mask kernels start at zero so the widened network computes the
    /// same function until training moves them.
    pub fn widened_to_mask_input(&self) -> Result<Self> {
        if self.config.input_channels != 3 {
            return Err(Error::InvalidArgument(
                "encoder already takes a mask channel".into(),
            ));
        }
        let mut config = self.config.clone();
        config.input_channels = 4;
        let mut blocks = self.blocks.clone();
        let old = &self.blocks[0].conv;
        let c_out = old.out_channels();
        let mut weight = Array2::zeros((c_out, 4 * 9));
        weight
            .slice_mut(s![.., 0..27])
            .assign(&old.weight.slice(s![.., 0..27]));
        blocks[0].conv = Conv2d::from_parts(weight, old.bias.clone());
        Ok(EmbeddingEncoder { config, blocks })
    }

    pub fn embed(&self, image: ArrayView3<F>, mask: Option<ArrayView2<F>>) -> Result<Array1<F>> {
        let mut x = self.prepare_input(image, mask)?;
        for b in &self.blocks {
            x = b.infer(x.view());
        }
        Ok(global_avg_pool(x.view()))
    }

    pub fn embed_with_cache(
        &self,
        image: ArrayView3<F>,
        mask: Option<ArrayView2<F>>,
    ) -> Result<(Array1<F>, EmbedCache<F>)> {
        let mut x = self.prepare_input(image, mask)?;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (nx, cache) = b.forward(x.view());
            caches.push(cache);
            x = nx;
        }
        let dims = x.dim();
        Ok((
            global_avg_pool(x.view()),
            EmbedCache {
                blocks: caches,
                pre_pool_dims: dims,
            },
        ))
    }

    /// Accumulates parameter gradients from an embedding gradient. Blocks
    /// below `lowest_block` are skipped entirely, which both freezes them and
    /// saves their backward cost.
    pub fn backward(
        &self,
        cache: &EmbedCache<F>,
        dembedding: ndarray::ArrayView1<F>,
        grads: &mut GradStore<F>,
        lowest_block: usize,
    ) {
        let mut dx = global_avg_pool_backward(dembedding, cache.pre_pool_dims);
        for i in (lowest_block..self.blocks.len()).rev() {
            let slots = &mut grads.0[i * PARAMS_PER_BLOCK..(i + 1) * PARAMS_PER_BLOCK];
            let next = self.blocks[i].backward(&cache.blocks[i], dx.view(), slots, i > lowest_block);
            match next {
                Some(d) => dx = d,
                None => break,
            }
        }
    }
}
