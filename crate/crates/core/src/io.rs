//! File formats and run records: FMAP tensor files, PNG images and label
//! masks, SHA-256 hashing, atomic writes, and the JSON run manifest.
//!
//! All writes go through [`atomic_write`]: content is fully encoded in
//! memory, written to a temporary file in the destination directory, and
//! renamed into place, so readers never observe partial files.

use std::collections::BTreeMap;
use std::fs;
use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::pipeline::TransferConfig;
use crate::tensor::{FeatureMap, SegmentationMask, DEFAULT_IGNORE_ID};
use crate::{Error, Result};

/// Version string stamped into manifests and reports.
pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");

const FMAP_MAGIC: &[u8; 4] = b"FMAP";
const FMAP_VERSION: u32 = 1;
const DTYPE_F32_LE: u8 = 0;

fn io_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Io { path: path.to_path_buf(), reason: reason.into() }
}

/// Writes `bytes` to `path` atomically: temp file in the same directory,
/// then rename. On error the destination is left untouched.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)
        .map_err(|e| io_err(path, format!("cannot create temporary file: {e}")))?;
    std::io::Write::write_all(&mut tmp, bytes)
        .map_err(|e| io_err(path, format!("cannot write temporary file: {e}")))?;
    tmp.persist(path)
        .map_err(|e| io_err(path, format!("cannot rename into place: {e}")))?;
    Ok(())
}

/// Hex-encoded SHA-256 of a file's bytes.
pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e.to_string()))?;
    Ok(sha256_bytes(&bytes))
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

/// Serializes a feature map into the FMAP container: magic, format version,
/// dimension count, dimensions, dtype code, then raw little-endian values.
/// Round-trips are bit-exact.
pub fn encode_fmap(f: &FeatureMap) -> Result<Vec<u8>> {
    let dims = [f.channels(), f.height(), f.width()];
    let mut buf = Vec::with_capacity(4 + 4 + 4 + dims.len() * 4 + 1 + f.len() * 4);
    buf.extend_from_slice(FMAP_MAGIC);
    push_u32(&mut buf, FMAP_VERSION);
    push_u32(&mut buf, dims.len() as u32);
    for d in dims {
        let d32: u32 = d
            .try_into()
            .map_err(|_| Error::InvalidInput(format!("dimension {d} exceeds the u32 range")))?;
        push_u32(&mut buf, d32);
    }
    buf.push(DTYPE_F32_LE);
    for v in f.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

pub fn save_fmap(f: &FeatureMap, path: &Path) -> Result<()> {
    atomic_write(path, &encode_fmap(f)?)
}

pub fn decode_fmap(bytes: &[u8], path: &Path) -> Result<FeatureMap> {
    let mut off = 0usize;
    let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
        let end = off.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| {
            io_err(path, format!("truncated FMAP file: need {n} bytes at offset {off}"))
        })?;
        let s = &bytes[*off..end];
        *off = end;
        Ok(s)
    };
    let magic = take(&mut off, 4)?;
    if magic != FMAP_MAGIC {
        return Err(io_err(path, "not an FMAP file (bad magic)"));
    }
    let read_u32 = |off: &mut usize| -> Result<u32> {
        let b = take(off, 4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    };
    let version = read_u32(&mut off)?;
    if version != FMAP_VERSION {
        return Err(io_err(path, format!("unsupported FMAP version {version}")));
    }
    let ndim = read_u32(&mut off)?;
    if ndim != 3 {
        return Err(io_err(path, format!("expected 3 dimensions, file has {ndim}")));
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = read_u32(&mut off)? as usize;
    }
    let dtype = take(&mut off, 1)?[0];
    if dtype != DTYPE_F32_LE {
        return Err(io_err(path, format!("unsupported dtype code {dtype}")));
    }
    let count = dims[0]
        .checked_mul(dims[1])
        .and_then(|v| v.checked_mul(dims[2]))
        .ok_or_else(|| io_err(path, "dimension product overflows"))?;
    let payload = take(&mut off, count * 4)?;
    if off != bytes.len() {
        return Err(io_err(path, format!("{} trailing bytes after payload", bytes.len() - off)));
    }
    let mut data = Vec::with_capacity(count);
    for chunk in payload.chunks_exact(4) {
        data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
    }
    FeatureMap::new(dims[0], dims[1], dims[2], data)
        .map_err(|e| io_err(path, format!("invalid tensor content: {e}")))
}

pub fn load_fmap(path: &Path) -> Result<FeatureMap> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e.to_string()))?;
    decode_fmap(&bytes, path)
}

/// Loads an 8- or 16-bit grayscale or RGB PNG, scaling values to `[0, 1]`
/// in channel-major layout.
pub fn load_image(path: &Path) -> Result<FeatureMap> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e.to_string()))?;
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Png)
        .map_err(|e| io_err(path, format!("cannot decode PNG: {e}")))?;
    let (channels, h, w, data) = match img {
        DynamicImage::ImageLuma8(b) => {
            let (w, h) = (b.width() as usize, b.height() as usize);
            let mut data = vec![0.0f32; h * w];
            for (x, y, p) in b.enumerate_pixels() {
                data[y as usize * w + x as usize] = p.0[0] as f32 / 255.0;
            }
            (1, h, w, data)
        }
        DynamicImage::ImageLuma16(b) => {
            let (w, h) = (b.width() as usize, b.height() as usize);
            let mut data = vec![0.0f32; h * w];
            for (x, y, p) in b.enumerate_pixels() {
                data[y as usize * w + x as usize] = p.0[0] as f32 / 65535.0;
            }
            (1, h, w, data)
        }
        DynamicImage::ImageRgb8(b) => {
            let (w, h) = (b.width() as usize, b.height() as usize);
            let mut data = vec![0.0f32; 3 * h * w];
            for (x, y, p) in b.enumerate_pixels() {
                for c in 0..3 {
                    data[(c * h + y as usize) * w + x as usize] = p.0[c] as f32 / 255.0;
                }
            }
            (3, h, w, data)
        }
        DynamicImage::ImageRgb16(b) => {
            let (w, h) = (b.width() as usize, b.height() as usize);
            let mut data = vec![0.0f32; 3 * h * w];
            for (x, y, p) in b.enumerate_pixels() {
                for c in 0..3 {
                    data[(c * h + y as usize) * w + x as usize] = p.0[c] as f32 / 65535.0;
                }
            }
            (3, h, w, data)
        }
        other => {
            return Err(io_err(
                path,
                format!("unsupported color type {:?}; need 8/16-bit grayscale or RGB", other.color()),
            ))
        }
    };
    FeatureMap::new(channels, h, w, data)
        .map_err(|e| io_err(path, format!("decoded image invalid: {e}")))
}

/// Encodes a 1- or 3-channel feature map as an 8-bit PNG, clamping values
/// to `[0, 1]` before quantization.
pub fn encode_image(f: &FeatureMap) -> Result<Vec<u8>> {
    if f.height() == 0 || f.width() == 0 {
        return Err(Error::InvalidInput("cannot encode an empty image".into()));
    }
    let quantize = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let (w, h) = (f.width() as u32, f.height() as u32);
    let dynimg = match f.channels() {
        1 => {
            let mut b = image::GrayImage::new(w, h);
            for (x, y, p) in b.enumerate_pixels_mut() {
                p.0[0] = quantize(f.get(0, y as usize, x as usize));
            }
            DynamicImage::ImageLuma8(b)
        }
        3 => {
            let mut b = RgbImage::new(w, h);
            for (x, y, p) in b.enumerate_pixels_mut() {
                for c in 0..3 {
                    p.0[c] = quantize(f.get(c, y as usize, x as usize));
                }
            }
            DynamicImage::ImageRgb8(b)
        }
        n => {
            return Err(Error::InvalidInput(format!(
                "PNG output needs 1 or 3 channels, map has {n}"
            )))
        }
    };
    let mut bytes = Vec::new();
    dynimg
        .write_to(&mut Cursor::new(&mut bytes), ImageFormat::Png)
        .map_err(|e| Error::InvalidInput(format!("PNG encoding failed: {e}")))?;
    Ok(bytes)
}

pub fn save_image(f: &FeatureMap, path: &Path) -> Result<()> {
    atomic_write(path, &encode_image(f)?)
}

/// Loads a label mask from an 8-bit single-channel PNG. Pixel values are
/// class ids verbatim; 255 is the ignore label.
pub fn load_mask(path: &Path) -> Result<SegmentationMask> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e.to_string()))?;
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Png)
        .map_err(|e| io_err(path, format!("cannot decode PNG: {e}")))?;
    let b = match img {
        DynamicImage::ImageLuma8(b) => b,
        other => {
            return Err(Error::InvalidInput(format!(
                "mask {} must be a single-channel 8-bit PNG, got {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    let (w, h) = (b.width() as usize, b.height() as usize);
    let mut labels = vec![0u32; h * w];
    for (x, y, p) in b.enumerate_pixels() {
        labels[y as usize * w + x as usize] = p.0[0] as u32;
    }
    SegmentationMask::new(h, w, labels, DEFAULT_IGNORE_ID)
        .map_err(|e| io_err(path, format!("decoded mask invalid: {e}")))
}

/// Encodes a mask as an 8-bit single-channel PNG. The mask's ignore id is
/// written as byte 255; any other label above 254 is rejected.
pub fn encode_mask(mask: &SegmentationMask) -> Result<Vec<u8>> {
    if mask.height() == 0 || mask.width() == 0 {
        return Err(Error::InvalidInput("cannot encode an empty mask".into()));
    }
    let mut b = image::GrayImage::new(mask.width() as u32, mask.height() as u32);
    for (x, y, p) in b.enumerate_pixels_mut() {
        let label = mask.label(y as usize, x as usize);
        p.0[0] = if label == mask.ignore_id() {
            255
        } else if label <= 254 {
            label as u8
        } else {
            return Err(Error::InvalidInput(format!(
                "label {label} at ({y},{x}) does not fit the 8-bit mask format"
            )));
        };
    }
    let mut bytes = Vec::new();
    DynamicImage::ImageLuma8(b)
        .write_to(&mut Cursor::new(&mut bytes), ImageFormat::Png)
        .map_err(|e| Error::InvalidInput(format!("PNG encoding failed: {e}")))?;
    Ok(bytes)
}

pub fn save_mask(mask: &SegmentationMask, path: &Path) -> Result<()> {
    atomic_write(path, &encode_mask(mask)?)
}

/// Path plus content hash of one file touched by a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

impl FileRecord {
    pub fn for_file(path: &Path) -> Result<Self> {
        Ok(Self { path: path.display().to_string(), sha256: sha256_file(path)? })
    }
}

/// Complete record of one CLI run: the exact command, the full transfer
/// configuration, hashes of every input and output, and any metrics
/// computed. Contains no timestamps, so identical runs produce identical
/// manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub engine_version: String,
    /// Argv echo; re-running it reproduces the outputs byte for byte.
    pub command: Vec<String>,
    pub seed: u64,
    pub config: TransferConfig,
    /// Input files keyed by role (`content`, `style`, `content-mask`, ...).
    pub inputs: BTreeMap<String, FileRecord>,
    pub outputs: Vec<FileRecord>,
    pub metrics: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(command: Vec<String>, config: TransferConfig) -> Self {
        Self {
            engine_version: ENGINE_VERSION.to_string(),
            command,
            seed: config.seed,
            config,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            metrics: BTreeMap::new(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self)
            .map_err(|e| Error::InvalidState(format!("manifest serialization failed: {e}")))?;
        atomic_write(path, &json)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| io_err(path, e.to_string()))?;
        serde_json::from_slice(&bytes)
            .map_err(|e| io_err(path, format!("cannot parse manifest: {e}")))
    }

    /// Checks that every output file still exists with its recorded hash.
    pub fn verify_outputs(&self) -> Result<()> {
        for rec in &self.outputs {
            let path = Path::new(&rec.path);
            let actual = sha256_file(path)?;
            if actual != rec.sha256 {
                return Err(Error::InvalidState(format!(
                    "output {} hash mismatch: manifest {} vs file {}",
                    rec.path, rec.sha256, actual
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{TransferConfig, TransferMode};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tmpdir() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn fmap_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let data: Vec<f32> = (0..3 * 5 * 7).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let f = FeatureMap::new(3, 5, 7, data).unwrap();
        let dir = tmpdir();
        let path = dir.path().join("t.fmap");
        save_fmap(&f, &path).unwrap();
        let back = load_fmap(&path).unwrap();
        assert_eq!(f, back);
        for (a, b) in f.data().iter().zip(back.data().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn fmap_rejects_corruption() {
        let f = FeatureMap::filled(1, 2, 2, 1.5).unwrap();
        let dir = tmpdir();
        let path = dir.path().join("t.fmap");

        let mut bytes = encode_fmap(&f).unwrap();
        bytes[0] = b'X';
        atomic_write(&path, &bytes).unwrap();
        assert!(matches!(load_fmap(&path), Err(Error::Io { .. })));

        let bytes = encode_fmap(&f).unwrap();
        atomic_write(&path, &bytes[..bytes.len() - 2]).unwrap();
        assert!(load_fmap(&path).is_err());

        let mut bytes = encode_fmap(&f).unwrap();
        bytes.push(0);
        atomic_write(&path, &bytes).unwrap();
        assert!(load_fmap(&path).is_err());
    }

    #[test]
    fn fmap_header_layout_is_stable() {
        let f = FeatureMap::filled(2, 1, 3, 0.0).unwrap();
        let bytes = encode_fmap(&f).unwrap();
        assert_eq!(&bytes[0..4], b"FMAP");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[20..24].try_into().unwrap()), 3);
        assert_eq!(bytes[24], 0);
        assert_eq!(bytes.len(), 25 + 6 * 4);
    }

    #[test]
    fn image_round_trip_preserves_8bit_values() {
        let mut f = FeatureMap::zeros(3, 4, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..6 {
                    let byte: u8 = rng.gen();
                    f.set(c, y, x, byte as f32 / 255.0);
                }
            }
        }
        let dir = tmpdir();
        let path = dir.path().join("img.png");
        save_image(&f, &path).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back.shape(), (3, 4, 6));
        assert!(f.max_abs_diff(&back).unwrap() < 1e-6);
    }

    #[test]
    fn grayscale_bytes_scale_by_255() {
        let dir = tmpdir();
        let path = dir.path().join("g.png");
        let mut b = image::GrayImage::new(2, 1);
        b.put_pixel(0, 0, image::Luma([0]));
        b.put_pixel(1, 0, image::Luma([51]));
        let mut bytes = Vec::new();
        DynamicImage::ImageLuma8(b)
            .write_to(&mut Cursor::new(&mut bytes), ImageFormat::Png)
            .unwrap();
        atomic_write(&path, &bytes).unwrap();
        let f = load_image(&path).unwrap();
        assert_eq!(f.shape(), (1, 1, 2));
        assert_eq!(f.get(0, 0, 0), 0.0);
        assert!((f.get(0, 0, 1) - 0.2).abs() < 1e-6);
    }

    #[test]
    fn unsupported_color_type_is_an_io_error() {
        let dir = tmpdir();
        let path = dir.path().join("rgba.png");
        let b = image::RgbaImage::new(2, 2);
        let mut bytes = Vec::new();
        DynamicImage::ImageRgba8(b)
            .write_to(&mut Cursor::new(&mut bytes), ImageFormat::Png)
            .unwrap();
        atomic_write(&path, &bytes).unwrap();
        assert!(matches!(load_image(&path), Err(Error::Io { .. })));
    }

    #[test]
    fn missing_file_reports_its_path() {
        let err = load_image(Path::new("/nonexistent/x.png")).unwrap_err();
        match err {
            Error::Io { path, .. } => assert_eq!(path, Path::new("/nonexistent/x.png")),
            other => panic!("expected Io error, got {other}"),
        }
    }

    #[test]
    fn mask_round_trip_preserves_labels_and_ignore() {
        let mut mask = SegmentationMask::filled(3, 4, 1);
        mask.set_label(0, 0, 0);
        mask.set_label(1, 2, 6);
        mask.set_label(2, 3, DEFAULT_IGNORE_ID);
        let dir = tmpdir();
        let path = dir.path().join("m.png");
        save_mask(&mask, &path).unwrap();
        let back = load_mask(&path).unwrap();
        assert_eq!(back, mask);
        assert_eq!(back.ignore_id(), DEFAULT_IGNORE_ID);
    }

    #[test]
    fn multichannel_mask_is_invalid_input() {
        let dir = tmpdir();
        let path = dir.path().join("m.png");
        let b = RgbImage::new(2, 2);
        let mut bytes = Vec::new();
        DynamicImage::ImageRgb8(b)
            .write_to(&mut Cursor::new(&mut bytes), ImageFormat::Png)
            .unwrap();
        atomic_write(&path, &bytes).unwrap();
        assert!(matches!(load_mask(&path), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn mask_label_histogram_matches_file_bytes() {
        let mut mask = SegmentationMask::filled(4, 4, 2);
        mask.set_label(0, 0, 5);
        mask.set_label(3, 3, 5);
        let bytes = encode_mask(&mask).unwrap();
        let img = image::load_from_memory_with_format(&bytes, ImageFormat::Png).unwrap();
        let decoded = img.to_luma8();
        let file_fives = decoded.pixels().filter(|p| p.0[0] == 5).count();
        let file_twos = decoded.pixels().filter(|p| p.0[0] == 2).count();
        assert_eq!(file_fives, mask.count_of(5));
        assert_eq!(file_twos, mask.count_of(2));
    }

    #[test]
    fn sha256_matches_known_vector() {
        let dir = tmpdir();
        let path = dir.path().join("empty");
        atomic_write(&path, b"").unwrap();
        assert_eq!(
            sha256_file(&path).unwrap(),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        assert_eq!(
            sha256_bytes(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn atomic_write_leaves_no_temp_files() {
        let dir = tmpdir();
        let path = dir.path().join("out.bin");
        atomic_write(&path, b"hello").unwrap();
        let entries: Vec<_> = fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(entries.len(), 1);
        assert_eq!(fs::read(&path).unwrap(), b"hello");
    }

    #[test]
    fn manifest_round_trips_and_verifies_outputs() {
        let dir = tmpdir();
        let out = dir.path().join("result.png");
        atomic_write(&out, b"fake-bytes").unwrap();
        let cfg = TransferConfig::for_mode(TransferMode::Cactif);
        let mut m = RunManifest::new(vec!["semstyle".into(), "transfer".into()], cfg);
        m.outputs.push(FileRecord::for_file(&out).unwrap());
        m.metrics.insert("psnr_db".into(), 31.5);
        let mpath = dir.path().join("manifest.json");
        m.save(&mpath).unwrap();
        let back = RunManifest::load(&mpath).unwrap();
        assert_eq!(back, m);
        back.verify_outputs().unwrap();
        atomic_write(&out, b"tampered").unwrap();
        assert!(back.verify_outputs().is_err());
    }

    #[test]
    fn identical_manifests_serialize_identically() {
        let cfg = TransferConfig::for_mode(TransferMode::Cacti);
        let a = RunManifest::new(vec!["semstyle".into()], cfg.clone());
        let b = RunManifest::new(vec!["semstyle".into()], cfg);
        assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());
    }
}
