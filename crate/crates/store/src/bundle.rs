//! Feature bundle directory format.
//!
//! ```text
//! <root>/manifest.json
//! <root>/objects/<id>/layer_<k>.f32   little-endian f32, row, col, channel order
//! <root>/objects/<id>/mask.u8         one byte per pixel at output resolution, 0 or 1
//! <root>/objects/<id>/thumb.png       optional
//! ```
//!
//! The manifest declares the layer shapes and a 64-bit xxHash per blob.

use std::fs;
use std::path::{Path, PathBuf};

use latsim_core::extraction::{FeatureSource, LayerDescriptor, LayerMaps, SegmentRegion};
use serde::{Deserialize, Serialize};

use crate::checksum::checksum_hex;
use crate::error::{Result, StoreError};

pub const BUNDLE_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    /// Side length of the network output (and of the masks), in pixels.
    pub output_resolution: usize,
    pub has_masks: bool,
    pub layers: Vec<LayerDescriptor>,
    pub objects: Vec<ObjectEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectEntry {
    pub id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    /// One checksum per layer, in layer order.
    pub layer_checksums: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_checksum: Option<String>,
    #[serde(default)]
    pub has_thumbnail: bool,
}

pub fn object_dir(root: &Path, id: u64) -> PathBuf {
    root.join("objects").join(id.to_string())
}

pub fn layer_path(root: &Path, id: u64, layer: usize) -> PathBuf {
    object_dir(root, id).join(format!("layer_{layer}.f32"))
}

pub fn mask_path(root: &Path, id: u64) -> PathBuf {
    object_dir(root, id).join("mask.u8")
}

pub fn thumbnail_path(root: &Path, id: u64) -> PathBuf {
    object_dir(root, id).join("thumb.png")
}

/// A validated bundle on disk. Blobs are read on demand.
#[derive(Debug, Clone)]
pub struct FeatureBundle {
    root: PathBuf,
    manifest: Manifest,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            StoreError::BundleFormat(format!("missing blob {}", path.display()))
        } else {
            StoreError::io(path)(e)
        }
    })
}

pub fn parse_manifest(text: &str) -> Result<Manifest> {
    let manifest: Manifest = serde_json::from_str(text).map_err(|e| StoreError::Manifest(e.to_string()))?;
    if manifest.format_version != BUNDLE_FORMAT_VERSION {
        return Err(StoreError::Version {
            found: manifest.format_version,
            expected: BUNDLE_FORMAT_VERSION,
        });
    }
    Ok(manifest)
}

impl FeatureBundle {
    /// Reads the manifest and checks every blob's presence, size and checksum.
    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let mpath = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => StoreError::Manifest(format!("no manifest at {}", mpath.display())),
            _ => StoreError::io(&mpath)(e),
        })?;
        let manifest = parse_manifest(&text)?;
        let bundle = Self { root, manifest };
        bundle.validate()?;
        Ok(bundle)
    }

    fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        if m.output_resolution == 0 {
            return Err(StoreError::BundleFormat("output resolution is zero".into()));
        }
        if m.layers.is_empty() {
            return Err(StoreError::BundleFormat("no layers declared".into()));
        }
        for l in &m.layers {
            l.validate(m.output_resolution)?;
        }
        let mut seen = std::collections::HashSet::new();
        for obj in &m.objects {
            if !seen.insert(obj.id) {
                return Err(StoreError::BundleFormat(format!("duplicate object id {}", obj.id)));
            }
            if obj.layer_checksums.len() != m.layers.len() {
                return Err(StoreError::BundleFormat(format!(
                    "object {} lists {} layer checksums for {} layers",
                    obj.id,
                    obj.layer_checksums.len(),
                    m.layers.len()
                )));
            }
            for (k, layer) in m.layers.iter().enumerate() {
                let path = layer_path(&self.root, obj.id, k);
                let bytes = read(&path)?;
                let expected = layer.resolution * layer.resolution * layer.channels * 4;
                if bytes.len() != expected {
                    return Err(StoreError::BundleFormat(format!(
                        "{}: {} bytes, layer `{}` declares {}x{}x{} f32 ({expected} bytes)",
                        path.display(),
                        bytes.len(),
                        layer.id,
                        layer.resolution,
                        layer.resolution,
                        layer.channels
                    )));
                }
                verify(&path, &bytes, &obj.layer_checksums[k])?;
            }
            match (&obj.mask_checksum, m.has_masks) {
                (Some(sum), true) => {
                    let path = mask_path(&self.root, obj.id);
                    let bytes = read(&path)?;
                    if bytes.len() != m.output_resolution * m.output_resolution {
                        return Err(StoreError::BundleFormat(format!(
                            "{}: {} bytes, expected {}",
                            path.display(),
                            bytes.len(),
                            m.output_resolution * m.output_resolution
                        )));
                    }
                    if bytes.iter().any(|&b| b > 1) {
                        return Err(StoreError::BundleFormat(format!("{}: mask values must be 0 or 1", path.display())));
                    }
                    verify(&path, &bytes, sum)?;
                }
                (None, false) => {}
                (None, true) => {
                    return Err(StoreError::BundleFormat(format!("object {} has no mask", obj.id)));
                }
                (Some(_), false) => {
                    return Err(StoreError::BundleFormat(format!(
                        "object {} lists a mask in a mask-less bundle",
                        obj.id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn object_ids(&self) -> Vec<u64> {
        self.manifest.objects.iter().map(|o| o.id).collect()
    }

    pub fn read_layer(&self, index: usize, layer: usize) -> Result<Vec<f32>> {
        let id = self.manifest.objects[index].id;
        let bytes = read(&layer_path(&self.root, id, layer))?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub fn read_mask(&self, index: usize) -> Result<Option<Vec<u8>>> {
        if !self.manifest.has_masks {
            return Ok(None);
        }
        let id = self.manifest.objects[index].id;
        read(&mask_path(&self.root, id)).map(Some)
    }

    pub fn read_thumbnail(&self, index: usize) -> Result<Option<Vec<u8>>> {
        let obj = &self.manifest.objects[index];
        if !obj.has_thumbnail {
            return Ok(None);
        }
        read(&thumbnail_path(&self.root, obj.id)).map(Some)
    }
}

fn verify(path: &Path, bytes: &[u8], expected: &str) -> Result<()> {
    let actual = checksum_hex(bytes);
    if !actual.eq_ignore_ascii_case(expected) {
        return Err(StoreError::Integrity(format!(
            "{}: checksum {actual}, manifest says {expected}",
            path.display()
        )));
    }
    Ok(())
}

impl FeatureSource<f64> for FeatureBundle {
    fn layers(&self) -> &[LayerDescriptor] {
        &self.manifest.layers
    }

    fn output_resolution(&self) -> usize {
        self.manifest.output_resolution
    }

    fn object_count(&self) -> usize {
        self.manifest.objects.len()
    }

    fn load_object(&self, index: usize) -> latsim_core::Result<(Vec<LayerMaps<f64>>, Option<SegmentRegion>)> {
        let to_core = |e: StoreError| latsim_core::Error::BundleFormat(e.to_string());
        let mut maps = Vec::with_capacity(self.manifest.layers.len());
        for (k, layer) in self.manifest.layers.iter().enumerate() {
            let raw = self.read_layer(index, k).map_err(to_core)?;
            let data: Vec<f64> = raw.into_iter().map(f64::from).collect();
            if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
                return Err(latsim_core::Error::Ingestion(format!(
                    "object {} layer `{}`: non-finite value at offset {pos}",
                    self.manifest.objects[index].id, layer.id
                )));
            }
            maps.push(LayerMaps::from_hwc(layer.resolution, layer.channels, &data)?);
        }
        let region = match self.read_mask(index).map_err(to_core)? {
            Some(mask) => Some(SegmentRegion::from_mask(self.manifest.output_resolution, &mask)?),
            None => None,
        };
        Ok((maps, region))
    }
}

/// Writes a bundle object by object; the manifest is written by [`BundleWriter::finish`].
pub struct BundleWriter {
    root: PathBuf,
    manifest: Manifest,
}

impl BundleWriter {
    pub fn create(root: impl AsRef<Path>, output_resolution: usize, layers: Vec<LayerDescriptor>, has_masks: bool) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        for l in &layers {
            l.validate(output_resolution)?;
        }
        fs::create_dir_all(root.join("objects")).map_err(StoreError::io(&root))?;
        Ok(Self {
            root,
            manifest: Manifest {
                format_version: BUNDLE_FORMAT_VERSION,
                output_resolution,
                has_masks,
                layers,
                objects: Vec::new(),
            },
        })
    }

    /// `layers` holds one row, column, channel ordered map per declared layer.
    pub fn add_object(&mut self, id: u64, label: Option<String>, layers: &[Vec<f32>], mask: Option<&[u8]>, thumbnail: Option<&[u8]>) -> Result<()> {
        let m = &self.manifest;
        if m.objects.iter().any(|o| o.id == id) {
            return Err(StoreError::BundleFormat(format!("duplicate object id {id}")));
        }
        if layers.len() != m.layers.len() {
            return Err(StoreError::BundleFormat(format!(
                "object {id}: {} layer maps for {} layers",
                layers.len(),
                m.layers.len()
            )));
        }
        for (data, layer) in layers.iter().zip(&m.layers) {
            if data.len() != layer.resolution * layer.resolution * layer.channels {
                return Err(StoreError::BundleFormat(format!(
                    "object {id}: layer `{}` has {} values, expected {}",
                    layer.id,
                    data.len(),
                    layer.resolution * layer.resolution * layer.channels
                )));
            }
        }
        match (mask, m.has_masks) {
            (Some(mk), true) if mk.len() == m.output_resolution * m.output_resolution && mk.iter().all(|&b| b <= 1) => {}
            (None, false) => {}
            _ => {
                return Err(StoreError::BundleFormat(format!(
                    "object {id}: mask missing, misplaced or not {0}x{0} binary",
                    m.output_resolution
                )))
            }
        }

        let dir = object_dir(&self.root, id);
        fs::create_dir_all(&dir).map_err(StoreError::io(&dir))?;
        let mut layer_checksums = Vec::with_capacity(layers.len());
        for (k, data) in layers.iter().enumerate() {
            let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
            let path = layer_path(&self.root, id, k);
            fs::write(&path, &bytes).map_err(StoreError::io(&path))?;
            layer_checksums.push(checksum_hex(&bytes));
        }
        let mask_checksum = match mask {
            Some(mk) => {
                let path = mask_path(&self.root, id);
                fs::write(&path, mk).map_err(StoreError::io(&path))?;
                Some(checksum_hex(mk))
            }
            None => None,
        };
        if let Some(png) = thumbnail {
            let path = thumbnail_path(&self.root, id);
            fs::write(&path, png).map_err(StoreError::io(&path))?;
        }
        self.manifest.objects.push(ObjectEntry {
            id,
            label,
            layer_checksums,
            mask_checksum,
            has_thumbnail: thumbnail.is_some(),
        });
        Ok(())
    }

    pub fn finish(self) -> Result<FeatureBundle> {
        let path = self.root.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self.manifest).map_err(|e| StoreError::Manifest(e.to_string()))?;
        fs::write(&path, text).map_err(StoreError::io(&path))?;
        FeatureBundle::load(&self.root)
    }
}

/// Copies a loaded bundle blob by blob through a [`BundleWriter`].
pub fn rewrite_bundle(src: &FeatureBundle, dst: impl AsRef<Path>) -> Result<FeatureBundle> {
    let m = src.manifest();
    let mut w = BundleWriter::create(dst, m.output_resolution, m.layers.clone(), m.has_masks)?;
    for (i, obj) in m.objects.iter().enumerate() {
        let layers = (0..m.layers.len()).map(|k| src.read_layer(i, k)).collect::<Result<Vec<_>>>()?;
        let mask = src.read_mask(i)?;
        let thumb = src.read_thumbnail(i)?;
        w.add_object(obj.id, obj.label.clone(), &layers, mask.as_deref(), thumb.as_deref())?;
    }
    w.finish()
}
