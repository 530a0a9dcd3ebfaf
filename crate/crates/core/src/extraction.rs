//! Mask backprojection and reduction of feature maps to activation magnitudes.
//!
//! A segment is described at the network's output resolution by its
//! bounding box, centroid and binary mask. For each selected layer the
//! segment is scaled to the layer's resolution and every channel is reduced
//! to a single magnitude (the mean over the activated pixels).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{masked_mean, Grid, Matrix};
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerGroup {
    Encoder,
    Bottleneck,
    Decoder,
}

impl LayerGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerGroup::Encoder => "encoder",
            LayerGroup::Bottleneck => "bottleneck",
            LayerGroup::Decoder => "decoder",
        }
    }
}

impl std::str::FromStr for LayerGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder" => Ok(Self::Encoder),
            "bottleneck" => Ok(Self::Bottleneck),
            "decoder" => Ok(Self::Decoder),
            other => Err(Error::Config(format!("unknown layer group `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDescriptor {
    pub id: String,
    /// Pixels per side of the (square) feature map.
    pub resolution: usize,
    pub channels: usize,
    pub group: LayerGroup,
}

impl LayerDescriptor {
    pub fn new(id: impl Into<String>, resolution: usize, channels: usize, group: LayerGroup) -> Self {
        Self {
            id: id.into(),
            resolution,
            channels,
            group,
        }
    }

    /// Checks that the layer resolution relates to `output` by a power of two.
    pub fn validate(&self, output: usize) -> Result<()> {
        if self.resolution == 0 || self.channels == 0 {
            return Err(Error::BundleFormat(format!(
                "layer `{}` has zero resolution or channels",
                self.id
            )));
        }
        let (hi, lo) = if self.resolution >= output {
            (self.resolution, output)
        } else {
            (output, self.resolution)
        };
        if lo == 0 || hi % lo != 0 || !(hi / lo).is_power_of_two() {
            return Err(Error::BundleFormat(format!(
                "layer `{}` resolution {} is not a power-of-two ratio of output {output}",
                self.id, self.resolution
            )));
        }
        Ok(())
    }
}

/// The layers selected for similarity analysis in the reference U-Net
/// (two 3x3 convolutions per block, 1600 channels in total).
pub fn unet_reference_layers() -> Vec<LayerDescriptor> {
    use LayerGroup::*;
    let blocks: [(u32, usize, usize, LayerGroup); 9] = [
        (1, 256, 64, Encoder),
        (2, 128, 128, Encoder),
        (3, 64, 192, Encoder),
        (4, 32, 256, Encoder),
        (5, 32, 320, Bottleneck),
        (6, 32, 256, Decoder),
        (7, 64, 192, Decoder),
        (8, 128, 128, Decoder),
        (9, 256, 64, Decoder),
    ];
    blocks
        .iter()
        .flat_map(|&(b, res, total, group)| {
            (1..=2).map(move |k| LayerDescriptor::new(format!("C{b}{k}"), res, total / 2, group))
        })
        .collect()
}

/// A segmented object at a given resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRegion {
    pub resolution: usize,
    /// (row, col) in pixels.
    pub centroid: (f64, f64),
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    /// Row-major `height x width` mask within the box.
    pub mask: Vec<bool>,
}

impl SegmentRegion {
    /// Region with a box of the given size centered on `centroid`, fully masked.
    pub fn from_box(resolution: usize, centroid: (f64, f64), height: usize, width: usize) -> Result<Self> {
        let top = box_origin(centroid.0, height);
        let left = box_origin(centroid.1, width);
        Self::clamped(resolution, centroid, top, left, height, width, vec![true; height * width])
    }

    /// Bounding box of the non-zero pixels of a full-resolution mask.
    pub fn from_mask(resolution: usize, mask: &[u8]) -> Result<Self> {
        if mask.len() != resolution * resolution {
            return Err(Error::Shape(format!(
                "mask has {} pixels, expected {}",
                mask.len(),
                resolution * resolution
            )));
        }
        let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
        for (idx, _) in mask.iter().enumerate().filter(|(_, &m)| m != 0) {
            let (r, c) = (idx / resolution, idx % resolution);
            r0 = r0.min(r);
            r1 = r1.max(r + 1);
            c0 = c0.min(c);
            c1 = c1.max(c + 1);
        }
        if r0 == usize::MAX {
            return Err(Error::EmptyRegion);
        }
        let (height, width) = (r1 - r0, c1 - c0);
        let mut inner = Vec::with_capacity(height * width);
        for r in r0..r1 {
            inner.extend(mask[r * resolution + c0..r * resolution + c1].iter().map(|&m| m != 0));
        }
        Ok(Self {
            resolution,
            centroid: (r0 as f64 + height as f64 / 2.0, c0 as f64 + width as f64 / 2.0),
            top: r0,
            left: c0,
            height,
            width,
            mask: inner,
        })
    }

    fn clamped(
        resolution: usize,
        centroid: (f64, f64),
        top: i64,
        left: i64,
        height: usize,
        width: usize,
        mask: Vec<bool>,
    ) -> Result<Self> {
        let res = resolution as i64;
        let (r0, r1) = (top.max(0), (top + height as i64).min(res));
        let (c0, c1) = (left.max(0), (left + width as i64).min(res));
        if r0 >= r1 || c0 >= c1 {
            return Err(Error::Bounds(format!(
                "region at ({top}, {left}) size {height}x{width} falls outside a {resolution}x{resolution} map"
            )));
        }
        let (h, w) = ((r1 - r0) as usize, (c1 - c0) as usize);
        let mut inner = Vec::with_capacity(h * w);
        for r in r0..r1 {
            let src_r = (r - top) as usize;
            for c in c0..c1 {
                inner.push(mask[src_r * width + (c - left) as usize]);
            }
        }
        Ok(Self {
            resolution,
            centroid,
            top: r0 as usize,
            left: c0 as usize,
            height: h,
            width: w,
            mask: inner,
        })
    }

    /// Coordinates of mask-positive pixels.
    pub fn masked_pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.box_pixels()
            .zip(self.mask.iter())
            .filter_map(|(p, &m)| m.then_some(p))
    }

    /// Coordinates of every pixel in the bounding box.
    pub fn box_pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let (top, left, w) = (self.top, self.left, self.width);
        (0..self.height).flat_map(move |r| (0..w).map(move |c| (top + r, left + c)))
    }

    pub fn translated(&self, dr: i64, dc: i64) -> Result<Self> {
        Self::clamped(
            self.resolution,
            (self.centroid.0 + dr as f64, self.centroid.1 + dc as f64),
            self.top as i64 + dr,
            self.left as i64 + dc,
            self.height,
            self.width,
            self.mask.clone(),
        )
    }
}

fn box_origin(center: f64, size: usize) -> i64 {
    (center - size as f64 / 2.0 + 0.5).floor() as i64
}

/// Scales a region from `src_res` to `dst_res`.
///
/// Centroid is scaled exactly; box sides round up and never drop below one
/// pixel; the mask is resampled by nearest neighbour; the box is clamped to
/// the destination map.
pub fn backproject_region(region: &SegmentRegion, src_res: usize, dst_res: usize) -> Result<SegmentRegion> {
    if src_res == 0 || dst_res == 0 {
        return Err(Error::Config("resolutions must be positive".into()));
    }
    if src_res == dst_res {
        let mut out = region.clone();
        out.resolution = dst_res;
        return Ok(out);
    }
    let scale = |v: f64| v * dst_res as f64 / src_res as f64;
    let scale_len = |n: usize| ((n * dst_res).div_ceil(src_res)).max(1);
    let centroid = (scale(region.centroid.0), scale(region.centroid.1));
    let (h, w) = (scale_len(region.height), scale_len(region.width));
    let mut mask = Vec::with_capacity(h * w);
    for a in 0..h {
        let sr = (((a as f64 + 0.5) * region.height as f64 / h as f64) as usize).min(region.height - 1);
        for b in 0..w {
            let sc = (((b as f64 + 0.5) * region.width as f64 / w as f64) as usize).min(region.width - 1);
            mask.push(region.mask[sr * region.width + sc]);
        }
    }
    SegmentRegion::clamped(
        dst_res,
        centroid,
        box_origin(centroid.0, h),
        box_origin(centroid.1, w),
        h,
        w,
        mask,
    )
}

/// Per-layer activations of one object, stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMaps<T> {
    pub resolution: usize,
    pub channels: usize,
    planes: Vec<T>,
}

impl<T: Scalar> LayerMaps<T> {
    /// From row, column, channel ordered data (the blob layout).
    pub fn from_hwc(resolution: usize, channels: usize, data: &[T]) -> Result<Self> {
        let px = resolution * resolution;
        if data.len() != px * channels {
            return Err(Error::BundleFormat(format!(
                "expected {resolution}x{resolution}x{channels} = {} values, got {}",
                px * channels,
                data.len()
            )));
        }
        let mut planes = vec![T::zero(); data.len()];
        for (p, pixel) in data.chunks_exact(channels).enumerate() {
            for (c, &v) in pixel.iter().enumerate() {
                planes[c * px + p] = v;
            }
        }
        Ok(Self {
            resolution,
            channels,
            planes,
        })
    }

    pub fn from_planes(resolution: usize, planes: Vec<Vec<T>>) -> Result<Self> {
        let px = resolution * resolution;
        if planes.iter().any(|p| p.len() != px) {
            return Err(Error::Shape(format!("every plane must have {px} values")));
        }
        Ok(Self {
            resolution,
            channels: planes.len(),
            planes: planes.concat(),
        })
    }

    pub fn channel(&self, c: usize) -> Grid<'_, T> {
        let px = self.resolution * self.resolution;
        Grid {
            height: self.resolution,
            width: self.resolution,
            data: &self.planes[c * px..(c + 1) * px],
        }
    }

    /// Back to row, column, channel order.
    pub fn to_hwc(&self) -> Vec<T> {
        let px = self.resolution * self.resolution;
        let mut out = vec![T::zero(); self.planes.len()];
        for c in 0..self.channels {
            for p in 0..px {
                out[p * self.channels + c] = self.planes[c * px + p];
            }
        }
        out
    }
}

/// Reduces a set of pixels of a map to one magnitude.
pub trait RegionDescriptor<T: Scalar>: Sync {
    fn describe(&self, map: &Grid<'_, T>, pixels: &[(usize, usize)]) -> Result<T>;
}

/// First statistical moment.
#[derive(Debug, Clone, Copy, Default)]
pub struct MeanDescriptor;

impl<T: Scalar> RegionDescriptor<T> for MeanDescriptor {
    fn describe(&self, map: &Grid<'_, T>, pixels: &[(usize, usize)]) -> Result<T> {
        masked_mean(map, pixels.iter().copied())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionMode {
    /// Mean over the backprojected segment.
    #[default]
    Masked,
    /// Mean over the whole feature map; segmentation is ignored.
    FullMap,
}

impl std::str::FromStr for ExtractionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "masked" => Ok(Self::Masked),
            "full-map" | "full_map" => Ok(Self::FullMap),
            other => Err(Error::Config(format!("unknown extraction mode `{other}`"))),
        }
    }
}

/// Which pixels of a backprojected region are averaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionReduce {
    #[default]
    MaskPositive,
    BoundingBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ExtractOptions {
    pub mode: ExtractionMode,
    pub reduce: RegionReduce,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectFeatureVector<T> {
    pub object: usize,
    pub values: Vec<T>,
    /// Index into the layer list for every component.
    pub sources: Vec<usize>,
}

/// Source of per-object feature maps, e.g. an on-disk bundle.
pub trait FeatureSource<T: Scalar>: Sync {
    fn layers(&self) -> &[LayerDescriptor];
    fn output_resolution(&self) -> usize;
    fn object_count(&self) -> usize;
    /// Feature maps in layer order, and the segment at output resolution if any.
    fn load_object(&self, index: usize) -> Result<(Vec<LayerMaps<T>>, Option<SegmentRegion>)>;
}

pub fn extract_object_vector<T: Scalar>(
    object: usize,
    maps: &[LayerMaps<T>],
    region: Option<&SegmentRegion>,
    layers: &[LayerDescriptor],
    opts: ExtractOptions,
) -> Result<ObjectFeatureVector<T>> {
    extract_with(object, maps, region, layers, opts, &MeanDescriptor)
}

pub fn extract_with<T: Scalar, D: RegionDescriptor<T>>(
    object: usize,
    maps: &[LayerMaps<T>],
    region: Option<&SegmentRegion>,
    layers: &[LayerDescriptor],
    opts: ExtractOptions,
    descriptor: &D,
) -> Result<ObjectFeatureVector<T>> {
    if maps.len() != layers.len() {
        return Err(Error::BundleFormat(format!(
            "object {object}: {} layer maps for {} layers",
            maps.len(),
            layers.len()
        )));
    }
    let total: usize = layers.iter().map(|l| l.channels).sum();
    let mut values = Vec::with_capacity(total);
    let mut sources = Vec::with_capacity(total);
    for (li, (layer, lm)) in layers.iter().zip(maps).enumerate() {
        if lm.resolution != layer.resolution || lm.channels != layer.channels {
            return Err(Error::BundleFormat(format!(
                "object {object}, layer `{}`: maps are {}x{}x{}, declared {}x{}x{}",
                layer.id, lm.resolution, lm.resolution, lm.channels, layer.resolution, layer.resolution, layer.channels
            )));
        }
        let pixels: Vec<(usize, usize)> = match opts.mode {
            ExtractionMode::FullMap => (0..lm.resolution)
                .flat_map(|r| (0..lm.resolution).map(move |c| (r, c)))
                .collect(),
            ExtractionMode::Masked => {
                let region = region.ok_or_else(|| {
                    Error::BundleFormat(format!("object {object} has no mask; masked extraction needs one"))
                })?;
                let local = backproject_region(region, region.resolution, layer.resolution)?;
                match opts.reduce {
                    RegionReduce::MaskPositive => local.masked_pixels().collect(),
                    RegionReduce::BoundingBox => local.box_pixels().collect(),
                }
            }
        };
        for c in 0..lm.channels {
            values.push(descriptor.describe(&lm.channel(c), &pixels)?);
            sources.push(li);
        }
    }
    Ok(ObjectFeatureVector {
        object,
        values,
        sources,
    })
}

/// Where a column of the activation matrix comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnOrigin {
    pub layer: usize,
    pub channel: usize,
}

pub fn column_origins(layers: &[LayerDescriptor]) -> Vec<ColumnOrigin> {
    layers
        .iter()
        .enumerate()
        .flat_map(|(layer, l)| (0..l.channels).map(move |channel| ColumnOrigin { layer, channel }))
        .collect()
}

/// Stacks one extracted vector per object into an `objects x channels` matrix.
///
/// Objects are extracted in parallel; row order follows the source order.
pub fn build_activation_matrix<T: Scalar, S: FeatureSource<T> + ?Sized>(
    source: &S,
    opts: ExtractOptions,
) -> Result<Matrix<T>> {
    let count = source.object_count();
    if count == 0 {
        return Err(Error::EmptyBundle);
    }
    let layers = source.layers();
    for l in layers {
        l.validate(source.output_resolution())?;
    }
    let width: usize = layers.iter().map(|l| l.channels).sum();
    let rows: Vec<Vec<T>> = (0..count)
        .into_par_iter()
        .map(|i| {
            let (maps, region) = source.load_object(i)?;
            let v = extract_object_vector(i, &maps, region.as_ref(), layers, opts)?;
            if v.values.len() != width {
                return Err(Error::BundleFormat(format!(
                    "object {i} yields {} features, expected {width}",
                    v.values.len()
                )));
            }
            Ok(v.values)
        })
        .collect::<Result<_>>()?;
    Matrix::new(count, width, rows.concat())
}
