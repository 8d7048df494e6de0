//! Residual backbones (18- and 50-layer) with a configurable stem.
//!
//! The small stem (3x3, stride 1, no pooling) keeps early spatial
//! resolution for 32 to 64 pixel inputs; the standard stem (7x7, stride 2,
//! max pooling) matches the original large-image layout.

use crate::error::{Error, Result};
use crate::nn::{
    global_avg_pool, global_avg_pool_backward, relu, relu_backward, BatchNorm2d, BnMode, BnStats,
    BufferRefs, Conv2d, MaxPool2d, MaxPoolCache, ParamRefs,
};
use crate::scalar::Scalar;
use ndarray::{Array2, Array4};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneArch {
    /// 18-layer backbone, 3x3 stride-1 stem, no stem pooling (32px inputs).
    Resnet18Small,
    /// 18-layer backbone, 3x3 stride-1 stem with stem pooling (64px inputs).
    Resnet18Medium,
    /// 18-layer backbone with the standard 7x7 stride-2 pooled stem.
    Resnet18,
    /// 50-layer bottleneck backbone with the standard stem.
    Resnet50,
}

impl BackboneArch {
    #[must_use]
    pub fn feature_dim(self) -> usize {
        match self {
            BackboneArch::Resnet50 => 2048,
            _ => 512,
        }
    }

    /// Whether the stem keeps the original 7x7 stride-2 convolution.
    #[must_use]
    pub fn has_wide_stem_conv(self) -> bool {
        matches!(self, BackboneArch::Resnet18 | BackboneArch::Resnet50)
    }

    #[must_use]
    pub fn has_pooled_stem(self) -> bool {
        !matches!(self, BackboneArch::Resnet18Small)
    }
}

#[derive(Debug, Clone)]
struct BasicBlock<S> {
    conv1: Conv2d<S>,
    bn1: BatchNorm2d<S>,
    conv2: Conv2d<S>,
    bn2: BatchNorm2d<S>,
    down: Option<(Conv2d<S>, BatchNorm2d<S>)>,
}

#[derive(Debug, Clone)]
struct BottleneckBlock<S> {
    conv1: Conv2d<S>,
    bn1: BatchNorm2d<S>,
    conv2: Conv2d<S>,
    bn2: BatchNorm2d<S>,
    conv3: Conv2d<S>,
    bn3: BatchNorm2d<S>,
    down: Option<(Conv2d<S>, BatchNorm2d<S>)>,
}

// A network uses one block kind throughout, so the variant size gap never
// wastes memory in practice and boxing would only add indirection.
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone)]
enum Block<S> {
    Basic(BasicBlock<S>),
    Bottleneck(BottleneckBlock<S>),
}

pub struct BasicBlockCache<S> {
    x: Array4<S>,
    c1_out: Array4<S>,
    s1: BnStats<S>,
    r1: Array4<S>,
    c2_out: Array4<S>,
    s2: BnStats<S>,
    down: Option<(Array4<S>, BnStats<S>)>,
    out: Array4<S>,
}

pub struct BottleneckBlockCache<S> {
    x: Array4<S>,
    c1_out: Array4<S>,
    s1: BnStats<S>,
    r1: Array4<S>,
    c2_out: Array4<S>,
    s2: BnStats<S>,
    r2: Array4<S>,
    c3_out: Array4<S>,
    s3: BnStats<S>,
    down: Option<(Array4<S>, BnStats<S>)>,
    out: Array4<S>,
}

#[allow(clippy::large_enum_variant)]
pub enum BlockCache<S> {
    Basic(BasicBlockCache<S>),
    Bottleneck(BottleneckBlockCache<S>),
}

impl<S: Scalar> BasicBlock<S> {
    fn new(c_in: usize, planes: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let down = (stride != 1 || c_in != planes).then(|| {
            (
                Conv2d::new(c_in, planes, 1, stride, 0, false, rng),
                BatchNorm2d::new(planes),
            )
        });
        BasicBlock {
            conv1: Conv2d::new(c_in, planes, 3, stride, 1, false, rng),
            bn1: BatchNorm2d::new(planes),
            conv2: Conv2d::new(planes, planes, 3, 1, 1, false, rng),
            bn2: BatchNorm2d::new(planes),
            down,
        }
    }

    fn forward(&mut self, x: &Array4<S>, mode: BnMode) -> Result<Array4<S>> {
        let out = relu(&self.bn1.forward(&self.conv1.forward(x)?, mode)?);
        let out = self.bn2.forward(&self.conv2.forward(&out)?, mode)?;
        let sc = match &mut self.down {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?, mode)?,
            None => x.clone(),
        };
        Ok(relu(&(out + sc)))
    }

    fn forward_train(&mut self, x: Array4<S>) -> Result<(Array4<S>, BasicBlockCache<S>)> {
        let c1_out = self.conv1.forward(&x)?;
        let (b1, s1) = self.bn1.forward_train(&c1_out, 1)?;
        let r1 = relu(&b1);
        let c2_out = self.conv2.forward(&r1)?;
        let (b2, s2) = self.bn2.forward_train(&c2_out, 1)?;
        let (sc, down) = match &mut self.down {
            Some((conv, bn)) => {
                let d_out = conv.forward(&x)?;
                let (d_bn, d_stats) = bn.forward_train(&d_out, 1)?;
                (d_bn, Some((d_out, d_stats)))
            }
            None => (x.clone(), None),
        };
        let out = relu(&(b2 + sc));
        Ok((
            out.clone(),
            BasicBlockCache {
                x,
                c1_out,
                s1,
                r1,
                c2_out,
                s2,
                down,
                out,
            },
        ))
    }

    fn backward(&mut self, cache: &BasicBlockCache<S>, dy: &Array4<S>) -> Result<Array4<S>> {
        let d_sum = relu_backward(&cache.out, dy);
        // Shortcut branch.
        let dx_sc = match (&mut self.down, &cache.down) {
            (Some((conv, bn)), Some((d_out, d_stats))) => {
                let d = bn.backward(d_out, d_stats, &d_sum)?;
                conv.backward(&cache.x, &d, true)?.expect("dx requested")
            }
            (None, None) => d_sum.clone(),
            _ => return Err(Error::Shape("block cache does not match block".to_string())),
        };
        // Main branch.
        let d = self.bn2.backward(&cache.c2_out, &cache.s2, &d_sum)?;
        let d = self.conv2.backward(&cache.r1, &d, true)?.expect("dx requested");
        let d = relu_backward(&cache.r1, &d);
        let d = self.bn1.backward(&cache.c1_out, &cache.s1, &d)?;
        let dx_main = self.conv1.backward(&cache.x, &d, true)?.expect("dx requested");
        Ok(dx_main + dx_sc)
    }

    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut ParamRefs<'a, S>) {
        self.conv1.collect_params(&format!("{prefix}.conv1"), out);
        self.bn1.collect_params(&format!("{prefix}.bn1"), out);
        self.conv2.collect_params(&format!("{prefix}.conv2"), out);
        self.bn2.collect_params(&format!("{prefix}.bn2"), out);
        if let Some((conv, bn)) = &mut self.down {
            conv.collect_params(&format!("{prefix}.down.conv"), out);
            bn.collect_params(&format!("{prefix}.down.bn"), out);
        }
    }

    fn collect_buffers<'a>(&'a mut self, prefix: &str, out: &mut BufferRefs<'a, S>) {
        self.bn1.collect_buffers(&format!("{prefix}.bn1"), out);
        self.bn2.collect_buffers(&format!("{prefix}.bn2"), out);
        if let Some((_, bn)) = &mut self.down {
            bn.collect_buffers(&format!("{prefix}.down.bn"), out);
        }
    }
}

impl<S: Scalar> BottleneckBlock<S> {
    fn new(c_in: usize, planes: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let c_out = planes * 4;
        let down = (stride != 1 || c_in != c_out).then(|| {
            (
                Conv2d::new(c_in, c_out, 1, stride, 0, false, rng),
                BatchNorm2d::new(c_out),
            )
        });
        BottleneckBlock {
            conv1: Conv2d::new(c_in, planes, 1, 1, 0, false, rng),
            bn1: BatchNorm2d::new(planes),
            conv2: Conv2d::new(planes, planes, 3, stride, 1, false, rng),
            bn2: BatchNorm2d::new(planes),
            conv3: Conv2d::new(planes, c_out, 1, 1, 0, false, rng),
            bn3: BatchNorm2d::new(c_out),
            down,
        }
    }

    fn forward(&mut self, x: &Array4<S>, mode: BnMode) -> Result<Array4<S>> {
        let out = relu(&self.bn1.forward(&self.conv1.forward(x)?, mode)?);
        let out = relu(&self.bn2.forward(&self.conv2.forward(&out)?, mode)?);
        let out = self.bn3.forward(&self.conv3.forward(&out)?, mode)?;
        let sc = match &mut self.down {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?, mode)?,
            None => x.clone(),
        };
        Ok(relu(&(out + sc)))
    }

    fn forward_train(&mut self, x: Array4<S>) -> Result<(Array4<S>, BottleneckBlockCache<S>)> {
        let c1_out = self.conv1.forward(&x)?;
        let (b1, s1) = self.bn1.forward_train(&c1_out, 1)?;
        let r1 = relu(&b1);
        let c2_out = self.conv2.forward(&r1)?;
        let (b2, s2) = self.bn2.forward_train(&c2_out, 1)?;
        let r2 = relu(&b2);
        let c3_out = self.conv3.forward(&r2)?;
        let (b3, s3) = self.bn3.forward_train(&c3_out, 1)?;
        let (sc, down) = match &mut self.down {
            Some((conv, bn)) => {
                let d_out = conv.forward(&x)?;
                let (d_bn, d_stats) = bn.forward_train(&d_out, 1)?;
                (d_bn, Some((d_out, d_stats)))
            }
            None => (x.clone(), None),
        };
        let out = relu(&(b3 + sc));
        Ok((
            out.clone(),
            BottleneckBlockCache {
                x,
                c1_out,
                s1,
                r1,
                c2_out,
                s2,
                r2,
                c3_out,
                s3,
                down,
                out,
            },
        ))
    }

    fn backward(&mut self, cache: &BottleneckBlockCache<S>, dy: &Array4<S>) -> Result<Array4<S>> {
        let d_sum = relu_backward(&cache.out, dy);
        let dx_sc = match (&mut self.down, &cache.down) {
            (Some((conv, bn)), Some((d_out, d_stats))) => {
                let d = bn.backward(d_out, d_stats, &d_sum)?;
                conv.backward(&cache.x, &d, true)?.expect("dx requested")
            }
            (None, None) => d_sum.clone(),
            _ => return Err(Error::Shape("block cache does not match block".to_string())),
        };
        let d = self.bn3.backward(&cache.c3_out, &cache.s3, &d_sum)?;
        let d = self.conv3.backward(&cache.r2, &d, true)?.expect("dx requested");
        let d = relu_backward(&cache.r2, &d);
        let d = self.bn2.backward(&cache.c2_out, &cache.s2, &d)?;
        let d = self.conv2.backward(&cache.r1, &d, true)?.expect("dx requested");
        let d = relu_backward(&cache.r1, &d);
        let d = self.bn1.backward(&cache.c1_out, &cache.s1, &d)?;
        let dx_main = self.conv1.backward(&cache.x, &d, true)?.expect("dx requested");
        Ok(dx_main + dx_sc)
    }

    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut ParamRefs<'a, S>) {
        self.conv1.collect_params(&format!("{prefix}.conv1"), out);
        self.bn1.collect_params(&format!("{prefix}.bn1"), out);
        self.conv2.collect_params(&format!("{prefix}.conv2"), out);
        self.bn2.collect_params(&format!("{prefix}.bn2"), out);
        self.conv3.collect_params(&format!("{prefix}.conv3"), out);
        self.bn3.collect_params(&format!("{prefix}.bn3"), out);
        if let Some((conv, bn)) = &mut self.down {
            conv.collect_params(&format!("{prefix}.down.conv"), out);
            bn.collect_params(&format!("{prefix}.down.bn"), out);
        }
    }

    fn collect_buffers<'a>(&'a mut self, prefix: &str, out: &mut BufferRefs<'a, S>) {
        self.bn1.collect_buffers(&format!("{prefix}.bn1"), out);
        self.bn2.collect_buffers(&format!("{prefix}.bn2"), out);
        self.bn3.collect_buffers(&format!("{prefix}.bn3"), out);
        if let Some((_, bn)) = &mut self.down {
            bn.collect_buffers(&format!("{prefix}.down.bn"), out);
        }
    }
}

impl<S: Scalar> Block<S> {
    fn forward(&mut self, x: &Array4<S>, mode: BnMode) -> Result<Array4<S>> {
        match self {
            Block::Basic(b) => b.forward(x, mode),
            Block::Bottleneck(b) => b.forward(x, mode),
        }
    }

    fn forward_train(&mut self, x: Array4<S>) -> Result<(Array4<S>, BlockCache<S>)> {
        match self {
            Block::Basic(b) => {
                let (y, c) = b.forward_train(x)?;
                Ok((y, BlockCache::Basic(c)))
            }
            Block::Bottleneck(b) => {
                let (y, c) = b.forward_train(x)?;
                Ok((y, BlockCache::Bottleneck(c)))
            }
        }
    }

    fn backward(&mut self, cache: &BlockCache<S>, dy: &Array4<S>) -> Result<Array4<S>> {
        match (self, cache) {
            (Block::Basic(b), BlockCache::Basic(c)) => b.backward(c, dy),
            (Block::Bottleneck(b), BlockCache::Bottleneck(c)) => b.backward(c, dy),
            _ => Err(Error::Shape("block cache does not match block".to_string())),
        }
    }

    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut ParamRefs<'a, S>) {
        match self {
            Block::Basic(b) => b.collect_params(prefix, out),
            Block::Bottleneck(b) => b.collect_params(prefix, out),
        }
    }

    fn collect_buffers<'a>(&'a mut self, prefix: &str, out: &mut BufferRefs<'a, S>) {
        match self {
            Block::Basic(b) => b.collect_buffers(prefix, out),
            Block::Bottleneck(b) => b.collect_buffers(prefix, out),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ResNet<S> {
    arch: BackboneArch,
    stem_conv: Conv2d<S>,
    stem_bn: BatchNorm2d<S>,
    stem_pool: Option<MaxPool2d>,
    blocks: Vec<Block<S>>,
}

pub struct ResNetCache<S> {
    stem_x: Array4<S>,
    stem_c_out: Array4<S>,
    stem_stats: BnStats<S>,
    stem_r: Array4<S>,
    pool: Option<MaxPoolCache>,
    blocks: Vec<BlockCache<S>>,
    feat_h: usize,
    feat_w: usize,
}

impl<S: Scalar> ResNet<S> {
    pub fn new(arch: BackboneArch, rng: &mut impl Rng) -> Self {
        let stem_conv = if arch.has_wide_stem_conv() {
            Conv2d::new(3, 64, 7, 2, 3, false, rng)
        } else {
            Conv2d::new(3, 64, 3, 1, 1, false, rng)
        };
        let stem_pool = arch.has_pooled_stem().then_some(MaxPool2d {
            kernel: 3,
            stride: 2,
            padding: 1,
        });
        let (counts, bottleneck): ([usize; 4], bool) = match arch {
            BackboneArch::Resnet50 => ([3, 4, 6, 3], true),
            _ => ([2, 2, 2, 2], false),
        };
        let planes = [64usize, 128, 256, 512];
        let expansion = if bottleneck { 4 } else { 1 };
        let mut blocks = Vec::new();
        let mut c_in = 64;
        for (stage, (&n, &p)) in counts.iter().zip(planes.iter()).enumerate() {
            for i in 0..n {
                let stride = if stage > 0 && i == 0 { 2 } else { 1 };
                let block = if bottleneck {
                    Block::Bottleneck(BottleneckBlock::new(c_in, p, stride, rng))
                } else {
                    Block::Basic(BasicBlock::new(c_in, p, stride, rng))
                };
                blocks.push(block);
                c_in = p * expansion;
            }
        }
        ResNet {
            arch,
            stem_conv,
            stem_bn: BatchNorm2d::new(64),
            stem_pool,
            blocks,
        }
    }

    #[must_use]
    pub fn arch(&self) -> BackboneArch {
        self.arch
    }

    #[must_use]
    pub fn feature_dim(&self) -> usize {
        self.arch.feature_dim()
    }

    /// Features before pooling: [B, C, h, w].
    pub fn forward_map(&mut self, x: &Array4<S>, mode: BnMode) -> Result<Array4<S>> {
        let mut h = relu(&self.stem_bn.forward(&self.stem_conv.forward(x)?, mode)?);
        if let Some(pool) = self.stem_pool {
            h = pool.forward(&h)?.0;
        }
        for block in &mut self.blocks {
            h = block.forward(&h, mode)?;
        }
        Ok(h)
    }

    /// Pooled features: [B, feature_dim].
    pub fn forward(&mut self, x: &Array4<S>, mode: BnMode) -> Result<Array2<S>> {
        Ok(global_avg_pool(&self.forward_map(x, mode)?))
    }

    /// Training forward with caches for [`ResNet::backward`]. Uses
    /// single-group batch statistics.
    pub fn forward_train(&mut self, x: Array4<S>) -> Result<(Array2<S>, ResNetCache<S>)> {
        let stem_c_out = self.stem_conv.forward(&x)?;
        let (b, stem_stats) = self.stem_bn.forward_train(&stem_c_out, 1)?;
        let stem_r = relu(&b);
        let (mut h, pool) = match self.stem_pool {
            Some(pool) => {
                let (y, cache) = pool.forward(&stem_r)?;
                (y, Some(cache))
            }
            None => (stem_r.clone(), None),
        };
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &mut self.blocks {
            let (y, cache) = block.forward_train(h)?;
            caches.push(cache);
            h = y;
        }
        let (_, _, fh, fw) = h.dim();
        let feat = global_avg_pool(&h);
        Ok((
            feat,
            ResNetCache {
                stem_x: x,
                stem_c_out,
                stem_stats,
                stem_r,
                pool,
                blocks: caches,
                feat_h: fh,
                feat_w: fw,
            },
        ))
    }

    /// Accumulates parameter gradients from dL/d(pooled features).
    pub fn backward(&mut self, cache: &ResNetCache<S>, dfeat: &Array2<S>) -> Result<()> {
        let mut d = global_avg_pool_backward(dfeat, cache.feat_h, cache.feat_w);
        for (block, bc) in self.blocks.iter_mut().zip(cache.blocks.iter()).rev() {
            d = block.backward(bc, &d)?;
        }
        if let (Some(pool), Some(pc)) = (self.stem_pool, &cache.pool) {
            d = pool.backward(pc, &d);
        }
        let d = relu_backward(&cache.stem_r, &d);
        let d = self.stem_bn.backward(&cache.stem_c_out, &cache.stem_stats, &d)?;
        self.stem_conv.backward(&cache.stem_x, &d, false)?;
        Ok(())
    }

    pub fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut ParamRefs<'a, S>) {
        self.stem_conv
            .collect_params(&format!("{prefix}stem.conv"), out);
        self.stem_bn.collect_params(&format!("{prefix}stem.bn"), out);
        for (i, block) in self.blocks.iter_mut().enumerate() {
            block.collect_params(&format!("{prefix}block{i}"), out);
        }
    }

    pub fn collect_buffers<'a>(&'a mut self, prefix: &str, out: &mut BufferRefs<'a, S>) {
        self.stem_bn.collect_buffers(&format!("{prefix}stem.bn"), out);
        for (i, block) in self.blocks.iter_mut().enumerate() {
            block.collect_buffers(&format!("{prefix}block{i}"), out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;

    #[test]
    fn small_backbone_keeps_resolution_until_stages() {
        let mut rng = derive_rng(0, "test-resnet", &[]);
        let mut net = ResNet::<f32>::new(BackboneArch::Resnet18Small, &mut rng);
        let x = Array4::<f32>::zeros((2, 3, 32, 32));
        let map = net
            .forward_map(&x, BnMode::Train { groups: 1 })
            .unwrap();
        // Stages halve 32 -> 16 -> 8 -> 4 with a stride-1 stem.
        assert_eq!(map.dim(), (2, 512, 4, 4));
        let feat = net.forward(&x, BnMode::Train { groups: 1 }).unwrap();
        assert_eq!(feat.dim(), (2, 512));
    }

    #[test]
    fn standard_backbone_downsamples_in_stem() {
        let mut rng = derive_rng(0, "test-resnet", &[1]);
        let mut net = ResNet::<f32>::new(BackboneArch::Resnet18, &mut rng);
        let x = Array4::<f32>::zeros((2, 3, 64, 64));
        let map = net
            .forward_map(&x, BnMode::Train { groups: 1 })
            .unwrap();
        // 64 -> 32 (stem conv) -> 16 (pool) -> 16, 8, 4, 2.
        assert_eq!(map.dim(), (2, 512, 2, 2));
    }

    #[test]
    fn medium_backbone_pools_but_keeps_stem_stride() {
        let mut rng = derive_rng(0, "test-resnet", &[7]);
        let mut net = ResNet::<f32>::new(BackboneArch::Resnet18Medium, &mut rng);
        let x = Array4::<f32>::zeros((2, 3, 64, 64));
        let map = net.forward_map(&x, BnMode::Train { groups: 1 }).unwrap();
        // 64 -> 64 (3x3 stride-1 stem) -> 32 (pool) -> 32, 16, 8, 4.
        assert_eq!(map.dim(), (2, 512, 4, 4));
    }

    #[test]
    fn bottleneck_backbone_expands_channels() {
        let mut rng = derive_rng(0, "test-resnet", &[2]);
        let mut net = ResNet::<f32>::new(BackboneArch::Resnet50, &mut rng);
        assert_eq!(net.feature_dim(), 2048);
        // A fresh network's running statistics are (0, 1), so eval mode
        // works without a warm-up pass; batch statistics would need more
        // than one value per channel at the 1x1 final resolution.
        let x = Array4::<f32>::zeros((1, 3, 32, 32));
        let feat = net.forward(&x, BnMode::Eval).unwrap();
        assert_eq!(feat.dim(), (1, 2048));
    }

    #[test]
    fn param_names_are_stable_and_unique() {
        let mut rng = derive_rng(0, "test-resnet", &[3]);
        let mut net = ResNet::<f32>::new(BackboneArch::Resnet18Small, &mut rng);
        let mut params = Vec::new();
        net.collect_params("", &mut params);
        let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len(), "duplicate parameter names");
        // 18-layer: stem conv+bn, 8 blocks with 2 conv + 2 bn each, plus 3
        // downsample pairs (first block of stages 2..4).
        let conv_count = names.iter().filter(|n| n.contains("conv")).count();
        assert_eq!(conv_count, 1 + 16 + 3);
        let mut again = Vec::new();
        net.collect_params("", &mut again);
        let names2: Vec<String> = again.iter().map(|(n, _)| n.clone()).collect();
        assert_eq!(names, names2, "collection order must be deterministic");
    }

    /// Train-cached forward and plain train forward must agree exactly
    /// (same statistics path), starting from identical running buffers.
    #[test]
    fn cached_forward_matches_uncached() {
        let mut rng = derive_rng(0, "test-resnet", &[4]);
        let net = ResNet::<f64>::new(BackboneArch::Resnet18Small, &mut rng);
        let x = Array4::from_shape_fn((2, 3, 16, 16), |(b, c, y, xx)| {
            ((b * 11 + c * 7 + y * 3 + xx) as f64 * 0.19).sin()
        });
        let mut n1 = net.clone();
        let mut n2 = net;
        let y1 = n1.forward(&x, BnMode::Train { groups: 1 }).unwrap();
        let (y2, _) = n2.forward_train(x).unwrap();
        let max_diff = y1
            .iter()
            .zip(y2.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff < 1e-12, "max_diff={max_diff}");
    }
}
