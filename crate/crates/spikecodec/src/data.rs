//! Dataset ingestion: big-endian IDX, CIFAR-10 binary records, and a
//! procedural synthetic task (oriented bars) for training sanity checks.
//! Also light augmentation (flip, reflect-pad crop) and manifest-based
//! provenance checks.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Noise level for the synthetic oriented-bar task.
pub const SYNTH_NOISE_SIGMA: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub source: String,
    pub sha256: String,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    /// [N,C,H,W], pixel values in [0,1].
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub split: String,
    pub provenance: Vec<Provenance>,
}

impl Dataset {
    pub fn new(
        images: Tensor,
        labels: Vec<usize>,
        n_classes: usize,
        split: impl Into<String>,
        provenance: Vec<Provenance>,
    ) -> Result<Self> {
        if images.ndim() != 4 {
            return Err(Error::shape("dataset", format!("images must be [N,C,H,W], got {:?}", images.shape())));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Input(format!(
                "{} images vs {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::Input(format!("label {bad} out of range (n_classes={n_classes})")));
        }
        if images.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Input("pixel values outside [0,1]".into()));
        }
        Ok(Dataset { images, labels, n_classes, split: split.into(), provenance })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Single image [C,H,W].
    pub fn image(&self, i: usize) -> Result<Tensor> {
        let shape = self.images.shape();
        let per = shape[1..].iter().product::<usize>();
        if i >= shape[0] {
            return Err(Error::Input(format!("image index {i} out of range {}", shape[0])));
        }
        Tensor::new(shape[1..].to_vec(), self.images.data()[i * per..(i + 1) * per].to_vec())
    }

    /// Gathers a batch [B,C,H,W] plus labels in the given index order.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let shape = self.images.shape();
        let per = shape[1..].iter().product::<usize>();
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= shape[0] {
                return Err(Error::Input(format!("batch index {i} out of range {}", shape[0])));
            }
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        let mut bshape = vec![indices.len()];
        bshape.extend_from_slice(&shape[1..]);
        Ok((Tensor::new(bshape, data)?, labels))
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(buf)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn be_u32(bytes: &[u8], offset: usize, path: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(path, offset as u64, "truncated header"))
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Parses an MNIST-style IDX image/label file pair. Pixels are scaled by
/// 1/255 into [0,1]; labels define n_classes as max+1 (at least 10 when any
/// label is a digit range is not assumed — callers may widen).
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let ipath = images_path.as_ref();
    let lpath = labels_path.as_ref();
    let ibytes = read_file(ipath)?;
    let lbytes = read_file(lpath)?;
    let ip = ipath.display().to_string();
    let lp = lpath.display().to_string();

    let imagic = be_u32(&ibytes, 0, &ip)?;
    if imagic != IDX_IMAGES_MAGIC {
        return Err(Error::format(&ip, 0, format!("bad image magic {imagic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")));
    }
    let n = be_u32(&ibytes, 4, &ip)? as usize;
    let h = be_u32(&ibytes, 8, &ip)? as usize;
    let w = be_u32(&ibytes, 12, &ip)? as usize;
    let expected = 16 + n * h * w;
    if ibytes.len() != expected {
        return Err(Error::format(&ip, ibytes.len().min(expected) as u64,
            format!("payload length {} != expected {expected}", ibytes.len())));
    }

    let lmagic = be_u32(&lbytes, 0, &lp)?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(Error::format(&lp, 0, format!("bad label magic {lmagic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")));
    }
    let ln = be_u32(&lbytes, 4, &lp)? as usize;
    if ln != n {
        return Err(Error::format(&lp, 4, format!("{ln} labels vs {n} images")));
    }
    if lbytes.len() != 8 + n {
        return Err(Error::format(&lp, lbytes.len().min(8 + n) as u64,
            format!("payload length {} != expected {}", lbytes.len(), 8 + n)));
    }

    let pixels: Vec<f64> = ibytes[16..].iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = lbytes[8..].iter().map(|&b| b as usize).collect();
    let n_classes = labels.iter().copied().max().map(|m| m + 1).unwrap_or(1).max(10);
    let provenance = vec![
        Provenance { source: ip, sha256: sha256_hex(&ibytes) },
        Provenance { source: lp, sha256: sha256_hex(&lbytes) },
    ];
    let images = if n == 0 {
        Tensor::zeros(&[0, 1, h.max(1), w.max(1)])
    } else {
        Tensor::new(vec![n, 1, h, w], pixels)?
    };
    Dataset::new(images, labels, n_classes, "unknown", provenance)
}

const CIFAR_RECORD: usize = 3073;

/// CIFAR-10 binary batches: 3073-byte records, 1 label byte then 3072
/// channel-planar (R,G,B) pixels. `limit` caps the total record count.
pub fn load_cifar10_bin(paths: &[impl AsRef<Path>], limit: Option<usize>) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    let mut provenance = Vec::new();
    let cap = limit.unwrap_or(usize::MAX);
    'outer: for p in paths {
        let path = p.as_ref();
        let bytes = read_file(path)?;
        let ps = path.display().to_string();
        if bytes.len() % CIFAR_RECORD != 0 {
            let offset = (bytes.len() / CIFAR_RECORD) * CIFAR_RECORD;
            return Err(Error::format(&ps, offset as u64,
                format!("file length {} not a multiple of {CIFAR_RECORD}", bytes.len())));
        }
        provenance.push(Provenance { source: ps.clone(), sha256: sha256_hex(&bytes) });
        for rec in bytes.chunks_exact(CIFAR_RECORD) {
            if labels.len() >= cap {
                break 'outer;
            }
            let label = rec[0] as usize;
            if label > 9 {
                return Err(Error::format(&ps, (labels.len() * CIFAR_RECORD) as u64,
                    format!("label byte {label} out of range 0..=9")));
            }
            labels.push(label);
            pixels.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
        }
    }
    let n = labels.len();
    let images = if n == 0 {
        Tensor::zeros(&[0, 3, 32, 32])
    } else {
        Tensor::new(vec![n, 3, 32, 32], pixels)?
    };
    Dataset::new(images, labels, 10, "unknown", provenance)
}

fn mix_seed(seed: u64, counter: u64) -> u64 {
    seed ^ (counter.wrapping_add(1)).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Class templates: an anti-aliased bar through the image center at angle
/// k*pi/n_classes, one class per orientation.
pub fn synth_template(class: usize, n_classes: usize, size: usize) -> Tensor {
    let theta = class as f64 * std::f64::consts::PI / n_classes as f64;
    let (dx, dy) = (theta.cos(), theta.sin());
    let c = (size as f64 - 1.0) / 2.0;
    let half_width = 0.75;
    let mut data = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let px = x as f64 - c;
            let py = y as f64 - c;
            // perpendicular distance from the pixel center to the bar axis
            let dist = (px * dy - py * dx).abs();
            let v = (1.0 - (dist - half_width).max(0.0)).clamp(0.0, 1.0);
            data.push(v);
        }
    }
    Tensor::new(vec![1, size, size], data).expect("template shape")
}

/// Deterministic synthetic dataset: round-robin class labels, template plus
/// per-sample Gaussian noise (clamped back into [0,1]).
pub fn synth_dataset(seed: u64, n: usize, n_classes: usize, size: usize, sigma: f64) -> Result<Dataset> {
    if !(2..=8).contains(&n_classes) {
        return Err(Error::Config(format!("n_classes must be in 2..=8, got {n_classes}")));
    }
    if size < 3 {
        return Err(Error::Config("size must be at least 3".into()));
    }
    let templates: Vec<Tensor> = (0..n_classes).map(|k| synth_template(k, n_classes, size)).collect();
    let mut pixels = Vec::with_capacity(n * size * size);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % n_classes;
        labels.push(k);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, i as u64));
        for &t in templates[k].data() {
            let noise = if sigma > 0.0 { sigma * gaussian(&mut rng) } else { 0.0 };
            pixels.push((t + noise).clamp(0.0, 1.0));
        }
    }
    let images = if n == 0 {
        Tensor::zeros(&[0, 1, size, size])
    } else {
        Tensor::new(vec![n, 1, size, size], pixels)?
    };
    Dataset::new(images, labels, n_classes, "synthetic", vec![])
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[derive(Debug, Clone, Copy, Default)]
pub struct AugmentFlags {
    pub flip: bool,
    pub crop_pad: usize,
}

/// Deterministic augmentation core: explicit flip decision and crop offset.
/// Offsets are within [0, 2*crop_pad].
pub fn augment_with(
    image: &Tensor,
    flags: AugmentFlags,
    do_flip: bool,
    crop_offset: (usize, usize),
) -> Result<Tensor> {
    let shape = image.shape();
    if shape.len() != 3 {
        return Err(Error::shape("augment", format!("expected [C,H,W], got {shape:?}")));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut out = image.clone();
    if flags.flip && do_flip {
        let mut flipped = vec![0.0; c * h * w];
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    flipped[(ci * h + y) * w + x] = out.data()[(ci * h + y) * w + (w - 1 - x)];
                }
            }
        }
        out = Tensor::new(shape.to_vec(), flipped)?;
    }
    let p = flags.crop_pad;
    if p > 0 {
        if p >= h || p >= w {
            return Err(Error::Config(format!("crop_pad {p} too large for {h}x{w} image")));
        }
        let (oy, ox) = crop_offset;
        if oy > 2 * p || ox > 2 * p {
            return Err(Error::Input(format!("crop offset {crop_offset:?} exceeds 2*pad={}", 2 * p)));
        }
        // reflect (no edge duplication): index -1 -> 1, index H -> H-2
        let reflect = |i: isize, n: usize| -> usize {
            let n = n as isize;
            let mut i = i;
            if i < 0 {
                i = -i;
            }
            if i >= n {
                i = 2 * n - 2 - i;
            }
            i as usize
        };
        let mut cropped = vec![0.0; c * h * w];
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let sy = reflect(y as isize + oy as isize - p as isize, h);
                    let sx = reflect(x as isize + ox as isize - p as isize, w);
                    cropped[(ci * h + y) * w + x] = out.data()[(ci * h + sy) * w + sx];
                }
            }
        }
        out = Tensor::new(shape.to_vec(), cropped)?;
    }
    Ok(out)
}

/// Randomized augmentation: flip with p = 1/2, uniform crop offset.
pub fn augment(image: &Tensor, rng: &mut impl Rng, flags: AugmentFlags) -> Result<Tensor> {
    let do_flip = flags.flip && rng.gen_bool(0.5);
    let offset = if flags.crop_pad > 0 {
        (rng.gen_range(0..=2 * flags.crop_pad), rng.gen_range(0..=2 * flags.crop_pad))
    } else {
        (0, 0)
    };
    augment_with(image, flags, do_flip, offset)
}

/// key=value manifest lines mapping file names to sha-256 hex digests.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<BTreeMap<String, String>> {
    let p = path.as_ref();
    let text = std::fs::read_to_string(p).map_err(|e| Error::io(p.display().to_string(), e))?;
    let mut map = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::format(&p.display().to_string(), lineno as u64, format!("expected key=value, got '{line}'"))
        })?;
        map.insert(k.trim().to_string(), v.trim().to_lowercase());
    }
    Ok(map)
}

/// Checks each manifest entry against the file's actual digest.
pub fn verify_manifest(dir: impl AsRef<Path>, manifest: &BTreeMap<String, String>) -> Result<()> {
    for (name, expected) in manifest {
        let path = dir.as_ref().join(name);
        let bytes = read_file(&path)?;
        let actual = sha256_hex(&bytes);
        if &actual != expected {
            return Err(Error::Input(format!(
                "checksum mismatch for {name}: manifest {expected}, file {actual}"
            )));
        }
    }
    Ok(())
}
