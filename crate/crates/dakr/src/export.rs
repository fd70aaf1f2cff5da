//! Synthetic domains on disk.
//!
//! `DIR/manifest.json` records the generation seed, every domain spec, split
//! membership and a SHA-256 of each file. Images are 16-bit binary PGM
//! (intensity scaled to 0..=65535), masks 8-bit PGM with 0 / 255.

use std::fs;
use std::path::{Path, PathBuf};

use dakr_core::metrics::Mask;
use dakr_core::synth::{default_sequence, generate_domain, split_indices, DomainSpec, Sample, SplitIndices, SplitSpec};
use dakr_core::train::DomainData;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const MANIFEST: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileEntry {
    pub index: usize,
    pub image: String,
    pub mask: String,
    pub image_sha256: String,
    pub mask_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainManifest {
    pub spec: DomainSpec,
    pub split: SplitIndices,
    pub files: Vec<FileEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub image_size: usize,
    pub samples_per_domain: usize,
    pub split_ratios: [f64; 3],
    pub domains: Vec<DomainManifest>,
}

/// Generate `t` domains and write them under `dir`.
pub fn write_domains(dir: &Path, t: usize, seed: u64, image_size: usize, samples: usize) -> CliResult<Manifest> {
    let ratios = SplitSpec::default();
    let specs = default_sequence(t, seed, image_size)?;
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut domains = Vec::with_capacity(t);
    for (d, spec) in specs.into_iter().enumerate() {
        let data = generate_domain(&spec, samples)?;
        let split = split_indices(samples, &ratios, spec.seed)?;
        let sub = format!("d{}", d);
        fs::create_dir_all(dir.join(&sub)).map_err(|e| CliError::io(dir.join(&sub), e))?;
        let mut files = Vec::with_capacity(samples);
        for (i, s) in data.iter().enumerate() {
            let image = format!("{}/img_{:04}.pgm", sub, i);
            let mask = format!("{}/mask_{:04}.pgm", sub, i);
            let image_bytes = encode_pgm16(image_size, image_size, &s.image);
            let mask_bytes = encode_mask(&s.mask);
            write_file(&dir.join(&image), &image_bytes)?;
            write_file(&dir.join(&mask), &mask_bytes)?;
            files.push(FileEntry {
                index: i,
                image,
                mask,
                image_sha256: sha256_hex(&image_bytes),
                mask_sha256: sha256_hex(&mask_bytes),
            });
        }
        domains.push(DomainManifest { spec, split, files });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        seed,
        image_size,
        samples_per_domain: samples,
        split_ratios: [ratios.train, ratios.val, ratios.test],
        domains,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&dir.join(MANIFEST), json.as_bytes())?;
    Ok(manifest)
}

/// Read domains back, verifying every hash. Images carry 16-bit quantization.
pub fn read_domains(dir: &Path) -> CliResult<(Manifest, Vec<DomainData>)> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| CliError::format(&path, e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(CliError::format(&path, format!("unsupported format version {}", manifest.format_version)));
    }
    let size = manifest.image_size;
    let mut out = Vec::with_capacity(manifest.domains.len());
    for dm in &manifest.domains {
        let mut samples = Vec::with_capacity(dm.files.len());
        for (i, f) in dm.files.iter().enumerate() {
            if f.index != i {
                return Err(CliError::format(&path, "file entries out of order"));
            }
            let image = read_checked(dir, &f.image, &f.image_sha256)?;
            let mask = read_checked(dir, &f.mask, &f.mask_sha256)?;
            let image_path = dir.join(&f.image);
            let image = decode_pgm(&image).map_err(|r| CliError::format(&image_path, r))?;
            let mask = decode_pgm(&mask).map_err(|r| CliError::format(dir.join(&f.mask), r))?;
            if [image.width, image.height, mask.width, mask.height] != [size; 4] {
                return Err(CliError::format(&image_path, "image size differs from the manifest"));
            }
            let max = image.maxval as f64;
            samples.push(Sample {
                image: image.pixels.iter().map(|&v| v as f64 / max).collect(),
                mask: Mask::new(size, size, mask.pixels.iter().map(|&v| v > 0).collect())?,
            });
        }
        let pick = |ix: &[usize]| -> CliResult<Vec<Sample>> {
            ix.iter()
                .map(|&i| samples.get(i).cloned().ok_or_else(|| CliError::format(&path, "split index out of range")))
                .collect()
        };
        out.push(DomainData {
            spec: dm.spec.clone(),
            train: pick(&dm.split.train)?,
            val: pick(&dm.split.val)?,
            test: pick(&dm.split.test)?,
        });
    }
    Ok((manifest, out))
}

pub fn encode_pgm16(width: usize, height: usize, values: &[f64]) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n65535\n", width, height).into_bytes();
    for &v in values {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    out
}

pub fn encode_mask(mask: &Mask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    out.extend(mask.bits().iter().map(|&b| if b { 255u8 } else { 0 }));
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub pixels: Vec<u16>,
}

/// Binary (P5) PGM with maxval up to 65535.
pub fn decode_pgm(bytes: &[u8]) -> Result<Pgm, String> {
    let mut pos = 0;
    let mut fields = [0usize; 3];
    if bytes.get(..2) != Some(b"P5") {
        return Err("not a binary PGM".into());
    }
    pos += 2;
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or("malformed PGM header")?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("malformed PGM header".into());
    }
    pos += 1;
    let [w, h, max] = fields;
    if w == 0 || h == 0 || max == 0 || max > 65535 {
        return Err("PGM dimensions or maxval out of range".into());
    }
    let wide = max > 255;
    let need = w * h * if wide { 2 } else { 1 };
    let body = &bytes[pos..];
    if body.len() != need {
        return Err(format!("PGM body has {} bytes, expected {}", body.len(), need));
    }
    let pixels = if wide {
        body.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    } else {
        body.iter().map(|&b| b as u16).collect()
    };
    Ok(Pgm { width: w, height: h, maxval: max as u16, pixels })
}

fn read_checked(dir: &Path, rel: &str, sha: &str) -> CliResult<Vec<u8>> {
    let path: PathBuf = dir.join(rel);
    let bytes = fs::read(&path).map_err(|e| CliError::io(&path, e))?;
    if sha256_hex(&bytes) != sha {
        return Err(CliError::format(&path, "SHA-256 mismatch"));
    }
    Ok(bytes)
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
