//! Dataset directory format: `manifest.json` plus
//! `domain_<id>/subject_<id>/slice_<k>.png` (8-bit grayscale) and
//! `slice_<k>_mask.png` (8-bit indexed, palette index = class id).

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::phantom::{DomainSpec, GeneratorConfig};
use super::{Dataset, Sample};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: &str = "vmfnet-synthetic/1";
pub const MANIFEST_NAME: &str = "manifest.json";

/// Class colors for the indexed mask palette.
pub const PALETTE: [[u8; 3]; 4] = [[0, 0, 0], [220, 40, 40], [40, 200, 60], [50, 90, 230]];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: String,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub generator: Option<GeneratorConfig>,
    pub domains: Vec<ManifestDomain>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestDomain {
    pub id: String,
    pub spec: Option<DomainSpec>,
    pub subjects: Vec<ManifestSubject>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestSubject {
    pub id: String,
    pub slices: Vec<ManifestSlice>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestSlice {
    pub index: usize,
    pub image: String,
    pub image_sha256: String,
    pub mask: Option<String>,
    pub mask_sha256: Option<String>,
    pub labeled: bool,
}

impl Manifest {
    /// Parses and structurally validates a manifest document.
    pub fn from_json(bytes: &[u8], path: &Path) -> Result<Self> {
        let manifest: Manifest = match serde_json::from_slice(bytes) {
            Ok(m) => m,
            Err(e) => {
                // Report an unknown version ahead of schema errors it may cause.
                if let Ok(value) = serde_json::from_slice::<serde_json::Value>(bytes) {
                    if let Some(v) = value.get("format_version").and_then(|v| v.as_str()) {
                        if v != FORMAT_VERSION {
                            return Err(Error::Version {
                                found: v.to_string(),
                                expected: FORMAT_VERSION.into(),
                            });
                        }
                    }
                }
                return Err(Error::corrupt(path, format!("invalid manifest: {e}")));
            }
        };
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Version {
                found: manifest.format_version,
                expected: FORMAT_VERSION.into(),
            });
        }
        if manifest.height == 0 || manifest.width == 0 || manifest.height > 4096 || manifest.width > 4096 {
            return Err(Error::corrupt(path, "image size out of range"));
        }
        if manifest.classes == 0 || manifest.classes > 254 {
            return Err(Error::corrupt(path, "class count out of range"));
        }
        let mut ids = std::collections::BTreeSet::new();
        for d in &manifest.domains {
            if !ids.insert(format!("domain:{}", d.id)) {
                return Err(Error::corrupt(path, format!("duplicate domain {}", d.id)));
            }
            for s in &d.subjects {
                if !ids.insert(format!("subject:{}", s.id)) {
                    return Err(Error::corrupt(path, format!("duplicate subject {}", s.id)));
                }
                for slice in &s.slices {
                    if slice.labeled && (slice.mask.is_none() || slice.mask_sha256.is_none()) {
                        return Err(Error::corrupt(
                            path,
                            format!("labeled slice {} of subject {} has no mask", slice.index, s.id),
                        ));
                    }
                    for rel in std::iter::once(&slice.image).chain(slice.mask.as_ref()) {
                        check_relative(rel, path)?;
                    }
                }
            }
        }
        Ok(manifest)
    }
}

fn check_relative(rel: &str, manifest: &Path) -> Result<()> {
    let p = Path::new(rel);
    let safe = !rel.is_empty()
        && p.components()
            .all(|c| matches!(c, std::path::Component::Normal(_)));
    if safe {
        Ok(())
    } else {
        Err(Error::corrupt(manifest, format!("file path {rel:?} escapes the dataset directory")))
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Pixel layout of an encoded PNG.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PngKind {
    Gray,
    /// Class ids with the fixed class palette.
    Indexed,
    Rgb,
}

pub fn encode_png(width: usize, height: usize, pixels: &[u8], kind: PngKind) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_depth(png::BitDepth::Eight);
        match kind {
            PngKind::Gray => enc.set_color(png::ColorType::Grayscale),
            PngKind::Indexed => {
                enc.set_color(png::ColorType::Indexed);
                enc.set_palette(PALETTE.concat());
            }
            PngKind::Rgb => enc.set_color(png::ColorType::Rgb),
        }
        let mut writer = enc.write_header().expect("in-memory PNG header");
        writer.write_image_data(pixels).expect("in-memory PNG data");
    }
    out
}

pub fn write_png(path: &Path, width: usize, height: usize, pixels: &[u8], kind: PngKind) -> Result<()> {
    write_file(path, &encode_png(width, height, pixels, kind))
}

/// Decodes an 8-bit grayscale or indexed PNG into `(width, height, pixels)`.
/// Indexed images yield raw palette indices.
pub fn read_png(bytes: &[u8]) -> std::result::Result<(usize, usize, Vec<u8>), String> {
    let mut decoder = png::Decoder::new_with_limits(Cursor::new(bytes), png::Limits { bytes: 1 << 26 });
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| e.to_string())?;
    let info = reader.info();
    if info.bit_depth != png::BitDepth::Eight {
        return Err(format!("unsupported bit depth {:?}", info.bit_depth));
    }
    if !matches!(info.color_type, png::ColorType::Grayscale | png::ColorType::Indexed) {
        return Err(format!("unsupported color type {:?}", info.color_type));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let size = reader.output_buffer_size().ok_or("image too large")?;
    let mut buf = vec![0; size];
    let frame = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
    buf.truncate(frame.buffer_size());
    if buf.len() != w * h {
        return Err(format!("decoded {} bytes for a {w}x{h} image", buf.len()));
    }
    Ok((w, h, buf))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes images, masks and the manifest for `dataset` under `out`.
pub fn write_dataset(dataset: &Dataset, cfg: &GeneratorConfig, out: &Path) -> Result<Manifest> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let specs = cfg.domain_specs();
    let mut domains = Vec::new();
    for (di, domain) in dataset.domains.iter().enumerate() {
        let mut subjects = Vec::new();
        for subject in dataset.subjects(Some(domain)) {
            let mut slices = Vec::new();
            for s in dataset.subject_samples(&subject) {
                let dir = format!("domain_{domain}/subject_{subject}");
                let image_rel = format!("{dir}/slice_{}.png", s.slice);
                let image_png = encode_png(dataset.width, dataset.height, &s.image, PngKind::Gray);
                write_file(&out.join(&image_rel), &image_png)?;
                let (mask, mask_sha256) = match &s.mask {
                    Some(m) => {
                        let rel = format!("{dir}/slice_{}_mask.png", s.slice);
                        let bytes = encode_png(dataset.width, dataset.height, m, PngKind::Indexed);
                        write_file(&out.join(&rel), &bytes)?;
                        (Some(rel), Some(sha256_hex(&bytes)))
                    }
                    None => (None, None),
                };
                slices.push(ManifestSlice {
                    index: s.slice,
                    image: image_rel,
                    image_sha256: sha256_hex(&image_png),
                    mask,
                    mask_sha256,
                    labeled: s.labeled,
                });
            }
            subjects.push(ManifestSubject { id: subject, slices });
        }
        domains.push(ManifestDomain {
            id: domain.clone(),
            spec: specs.get(di).cloned(),
            subjects,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION.into(),
        height: dataset.height,
        width: dataset.width,
        classes: dataset.classes,
        generator: Some(cfg.clone()),
        domains,
    };
    let mut json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    json.push(b'\n');
    write_file(&out.join(MANIFEST_NAME), &json)?;
    Ok(manifest)
}

fn read_checked(root: &Path, rel: &str, sha: &str) -> Result<(PathBuf, Vec<u8>)> {
    let path = root.join(rel);
    let bytes = match fs::read(&path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::corrupt(&path, "listed in the manifest but missing"))
        }
        Err(e) => return Err(Error::io(&path, e)),
    };
    if sha256_hex(&bytes) != sha {
        return Err(Error::corrupt(&path, "checksum mismatch"));
    }
    Ok((path, bytes))
}

/// Loads and validates a dataset directory (checksums, sizes, label ranges).
pub fn load(root: &Path) -> Result<Dataset> {
    let manifest_path = root.join(MANIFEST_NAME);
    let bytes = fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest = Manifest::from_json(&bytes, &manifest_path)?;
    let (h, w) = (manifest.height, manifest.width);
    let mut samples = Vec::new();
    for d in &manifest.domains {
        for s in &d.subjects {
            for slice in &s.slices {
                let (path, png_bytes) = read_checked(root, &slice.image, &slice.image_sha256)?;
                let (iw, ih, image) = read_png(&png_bytes).map_err(|e| Error::corrupt(&path, e))?;
                if (ih, iw) != (h, w) {
                    return Err(Error::corrupt(&path, format!("image is {iw}x{ih}, expected {w}x{h}")));
                }
                let mask = match (&slice.mask, &slice.mask_sha256) {
                    (Some(rel), Some(sha)) => {
                        let (path, png_bytes) = read_checked(root, rel, sha)?;
                        let (mw, mh, mask) = read_png(&png_bytes).map_err(|e| Error::corrupt(&path, e))?;
                        if (mh, mw) != (h, w) {
                            return Err(Error::corrupt(&path, format!("mask is {mw}x{mh}, expected {w}x{h}")));
                        }
                        if let Some(&bad) = mask.iter().find(|&&v| v as usize > manifest.classes) {
                            return Err(Error::corrupt(&path, format!("label {bad} exceeds class count")));
                        }
                        Some(mask)
                    }
                    (None, None) => None,
                    _ => return Err(Error::corrupt(&manifest_path, "mask path and checksum must come together")),
                };
                samples.push(Sample {
                    domain: d.id.clone(),
                    subject: s.id.clone(),
                    slice: slice.index,
                    image,
                    mask,
                    labeled: slice.labeled,
                });
            }
        }
    }
    Ok(Dataset {
        height: h,
        width: w,
        classes: manifest.classes,
        domains: manifest.domains.iter().map(|d| d.id.clone()).collect(),
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip_both_kinds() {
        let pixels: Vec<u8> = (0..12).map(|i| (i * 20) as u8).collect();
        let (w, h, back) = read_png(&encode_png(4, 3, &pixels, PngKind::Gray)).unwrap();
        assert_eq!((w, h), (4, 3));
        assert_eq!(back, pixels);
        let labels: Vec<u8> = (0..12).map(|i| (i % 4) as u8).collect();
        let (_, _, back) = read_png(&encode_png(4, 3, &labels, PngKind::Indexed)).unwrap();
        assert_eq!(back, labels);
    }

    #[test]
    fn garbage_png_is_an_error() {
        assert!(read_png(b"not a png").is_err());
        assert!(read_png(&[]).is_err());
    }

    #[test]
    fn manifest_rejects_escaping_paths() {
        let m = Manifest {
            format_version: FORMAT_VERSION.into(),
            height: 8,
            width: 8,
            classes: 3,
            generator: None,
            domains: vec![ManifestDomain {
                id: "A".into(),
                spec: None,
                subjects: vec![ManifestSubject {
                    id: "A00".into(),
                    slices: vec![ManifestSlice {
                        index: 0,
                        image: "../etc/passwd".into(),
                        image_sha256: String::new(),
                        mask: None,
                        mask_sha256: None,
                        labeled: false,
                    }],
                }],
            }],
        };
        let json = serde_json::to_vec(&m).unwrap();
        assert!(matches!(
            Manifest::from_json(&json, Path::new("m.json")),
            Err(Error::CorruptDataset { .. })
        ));
    }

    #[test]
    fn unknown_version() {
        let json = br#"{"format_version": "vmfnet-synthetic/9", "extra": 1}"#;
        assert!(matches!(
            Manifest::from_json(json, Path::new("m.json")),
            Err(Error::Version { .. })
        ));
    }
}
