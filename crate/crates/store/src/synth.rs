//! Synthetic bundles with planted cluster structure.
//!
//! Every object gets an elliptic blob mask. Inside the blob each channel is
//! lit at a level drawn around its cluster's signature; outside it carries
//! faint background noise. Some channels are dead (always zero) and some are
//! nuisance channels whose level is random per object regardless of cluster.

use std::path::Path;

use latsim_core::extraction::{LayerDescriptor, LayerGroup};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::bundle::{BundleWriter, FeatureBundle};
use crate::error::Result;

pub const SYNTH_OUTPUT_RESOLUTION: usize = 64;
/// Object ids start here so that ids and matrix rows never coincide.
pub const SYNTH_ID_OFFSET: u64 = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOptions {
    pub objects: usize,
    pub clusters: usize,
    pub seed: u64,
    /// Share of live channels that ignore cluster membership.
    pub nuisance_fraction: f64,
    /// Standard deviation of a signature channel around its cluster level.
    pub object_noise: f64,
    pub pixel_noise: f64,
}

impl SynthOptions {
    pub fn new(objects: usize, seed: u64) -> Self {
        Self {
            objects,
            clusters: 3,
            seed,
            nuisance_fraction: 0.4,
            object_noise: 0.04,
            pixel_noise: 0.05,
        }
    }
}

pub fn synth_layers() -> Vec<LayerDescriptor> {
    vec![
        LayerDescriptor::new("enc1", 64, 8, LayerGroup::Encoder),
        LayerDescriptor::new("enc2", 32, 8, LayerGroup::Encoder),
        LayerDescriptor::new("bottleneck", 16, 16, LayerGroup::Bottleneck),
        LayerDescriptor::new("dec1", 32, 8, LayerGroup::Decoder),
        LayerDescriptor::new("dec2", 64, 8, LayerGroup::Decoder),
    ]
}

/// Planted cluster of the `index`-th object. Clusters are interleaved.
pub fn planted_cluster(index: usize, clusters: usize) -> usize {
    index % clusters
}

pub fn synth_object_id(index: usize) -> u64 {
    SYNTH_ID_OFFSET + index as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ChannelKind {
    Dead,
    Nuisance,
    Signature,
}

pub fn synth_bundle(path: impl AsRef<Path>, opts: &SynthOptions) -> Result<FeatureBundle> {
    let layers = synth_layers();
    let res = SYNTH_OUTPUT_RESOLUTION;
    let channels: usize = layers.iter().map(|l| l.channels).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let kinds: Vec<ChannelKind> = (0..channels)
        .map(|c| {
            if c % 8 == 7 {
                ChannelKind::Dead
            } else if rng.random::<f64>() < opts.nuisance_fraction {
                ChannelKind::Nuisance
            } else {
                ChannelKind::Signature
            }
        })
        .collect();
    let clusters = opts.clusters.max(1);
    let signatures: Vec<Vec<f64>> = (0..clusters)
        .map(|_| (0..channels).map(|_| rng.random_range(0.1..1.0)).collect())
        .collect();
    let object_noise = Normal::new(0.0, opts.object_noise).expect("finite std");
    let pixel_noise = Normal::new(0.0, opts.pixel_noise).expect("finite std");

    let mut writer = BundleWriter::create(path, res, layers.clone(), true)?;
    for i in 0..opts.objects {
        let k = planted_cluster(i, clusters);
        let cy = rng.random_range(20.0..44.0);
        let cx = rng.random_range(20.0..44.0);
        let ry = rng.random_range(8.0..16.0);
        let rx = rng.random_range(8.0..16.0);
        let inside = |y: f64, x: f64| ((y - cy) / ry).powi(2) + ((x - cx) / rx).powi(2) <= 1.0;
        let mask: Vec<u8> = (0..res * res)
            .map(|p| u8::from(inside((p / res) as f64 + 0.5, (p % res) as f64 + 0.5)))
            .collect();

        let levels: Vec<f64> = kinds
            .iter()
            .enumerate()
            .map(|(c, kind)| match kind {
                ChannelKind::Dead => 0.0,
                ChannelKind::Nuisance => rng.random_range(0.0..1.0),
                ChannelKind::Signature => (signatures[k][c] + object_noise.sample(&mut rng)).max(0.0),
            })
            .collect();

        let mut maps = Vec::with_capacity(layers.len());
        let mut base = 0;
        for layer in &layers {
            let r = layer.resolution;
            let scale = res as f64 / r as f64;
            let mut data = vec![0f32; r * r * layer.channels];
            for y in 0..r {
                for x in 0..r {
                    let lit = inside((y as f64 + 0.5) * scale, (x as f64 + 0.5) * scale);
                    for c in 0..layer.channels {
                        let g = base + c;
                        if kinds[g] == ChannelKind::Dead {
                            continue;
                        }
                        let v = if lit {
                            levels[g] * (1.0 + pixel_noise.sample(&mut rng))
                        } else {
                            0.1 * pixel_noise.sample(&mut rng).abs()
                        };
                        data[(y * r + x) * layer.channels + c] = v.max(0.0) as f32;
                    }
                }
            }
            base += layer.channels;
            maps.push(data);
        }
        writer.add_object(synth_object_id(i), Some(format!("planted-{k}")), &maps, Some(&mask), None)?;
    }
    writer.finish()
}
