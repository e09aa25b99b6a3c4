//! Dataset ingestion (IDX and CIFAR binary formats), grayscale conversion,
//! train/validation/test splits, and simulation of an ordered stream with a
//! known-class warm-up and uniformly injected novel classes.

use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::metric::Label;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone)]
pub struct Dataset {
    /// Row-major pixel features scaled to [0, 1]; channel-planar when
    /// `channels > 1`.
    pub images: Vec<Vec<f64>>,
    pub labels: Vec<Label>,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn feature_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.is_empty() {
            return Err(Error::Format("dataset holds zero instances".into()));
        }
        if self.images.len() != self.labels.len() {
            return Err(Error::Format(format!(
                "{} images but {} labels",
                self.images.len(),
                self.labels.len()
            )));
        }
        let d = self.feature_len();
        for (i, img) in self.images.iter().enumerate() {
            if img.len() != d {
                return Err(Error::Format(format!(
                    "image {} has {} features, expected {}",
                    i,
                    img.len(),
                    d
                )));
            }
        }
        if self.labels.iter().any(|&l| l < 0) {
            return Err(Error::Format("negative class label".into()));
        }
        Ok(())
    }

    /// Sorted distinct labels.
    pub fn classes(&self) -> Vec<Label> {
        let mut c: Vec<Label> = self.labels.to_vec();
        c.sort_unstable();
        c.dedup();
        c
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            height: self.height,
            width: self.width,
            channels: self.channels,
        }
    }
}

fn read_u32(r: &mut impl Read, what: &str, offset: usize) -> Result<u32> {
    r.read_u32::<BigEndian>()
        .map_err(|_| Error::Format(format!("truncated {} at byte {}", what, offset)))
}

/// Reads an MNIST-style IDX image/label file pair. Pixels are scaled by
/// 1/255.
pub fn read_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let mut imgf = std::io::BufReader::new(std::fs::File::open(images_path)?);
    let magic = read_u32(&mut imgf, "image header", 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "bad image magic {:#010x} at byte 0, expected {:#010x}",
            magic, IDX_IMAGES_MAGIC
        )));
    }
    let n = read_u32(&mut imgf, "image header", 4)? as usize;
    let rows = read_u32(&mut imgf, "image header", 8)? as usize;
    let cols = read_u32(&mut imgf, "image header", 12)? as usize;
    if n == 0 {
        return Err(Error::Format("image file declares zero instances".into()));
    }
    let mut pixels = vec![0u8; n * rows * cols];
    imgf.read_exact(&mut pixels).map_err(|_| {
        Error::Format(format!(
            "image data truncated, expected {} bytes after the 16-byte header",
            n * rows * cols
        ))
    })?;

    let mut labf = std::io::BufReader::new(std::fs::File::open(labels_path)?);
    let magic = read_u32(&mut labf, "label header", 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "bad label magic {:#010x} at byte 0, expected {:#010x}",
            magic, IDX_LABELS_MAGIC
        )));
    }
    let ln = read_u32(&mut labf, "label header", 4)? as usize;
    if ln != n {
        return Err(Error::Format(format!(
            "{} images but label file declares {}",
            n, ln
        )));
    }
    let mut labels = vec![0u8; n];
    labf.read_exact(&mut labels).map_err(|_| {
        Error::Format(format!(
            "label data truncated, expected {} bytes after the 8-byte header",
            n
        ))
    })?;

    let d = rows * cols;
    let images = (0..n)
        .map(|i| pixels[i * d..(i + 1) * d].iter().map(|&b| b as f64 / 255.0).collect())
        .collect();
    let ds = Dataset {
        images,
        labels: labels.into_iter().map(|b| b as Label).collect(),
        height: rows,
        width: cols,
        channels: 1,
    };
    ds.validate()?;
    Ok(ds)
}

/// Writes a single-channel dataset back to the IDX pair format
/// (features rounded to bytes). Round-trips value-exactly for byte-derived
/// datasets.
pub fn write_idx(ds: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    if ds.channels != 1 {
        return Err(Error::Usage("IDX output is single-channel".into()));
    }
    ds.validate()?;
    let mut imgf = std::io::BufWriter::new(std::fs::File::create(images_path)?);
    imgf.write_u32::<BigEndian>(IDX_IMAGES_MAGIC)?;
    imgf.write_u32::<BigEndian>(ds.len() as u32)?;
    imgf.write_u32::<BigEndian>(ds.height as u32)?;
    imgf.write_u32::<BigEndian>(ds.width as u32)?;
    for img in &ds.images {
        let bytes: Vec<u8> = img.iter().map(|&v| (v * 255.0).round() as u8).collect();
        imgf.write_all(&bytes)?;
    }
    let mut labf = std::io::BufWriter::new(std::fs::File::create(labels_path)?);
    labf.write_u32::<BigEndian>(IDX_LABELS_MAGIC)?;
    labf.write_u32::<BigEndian>(ds.len() as u32)?;
    let bytes: Vec<u8> = ds.labels.iter().map(|&l| l as u8).collect();
    labf.write_all(&bytes)?;
    Ok(())
}

/// Reads CIFAR-style binary batches: each record is one label byte followed
/// by 3072 channel-planar pixel bytes (32x32 RGB).
pub fn read_cifar(paths: &[&Path]) -> Result<Dataset> {
    const REC: usize = 1 + 3 * 1024;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for p in paths {
        let bytes = std::fs::read(p)?;
        if bytes.is_empty() || bytes.len() % REC != 0 {
            return Err(Error::Format(format!(
                "{}: {} bytes is not a whole number of {}-byte records",
                p.display(),
                bytes.len(),
                REC
            )));
        }
        for rec in bytes.chunks_exact(REC) {
            labels.push(rec[0] as Label);
            images.push(rec[1..].iter().map(|&b| b as f64 / 255.0).collect());
        }
    }
    let ds = Dataset {
        images,
        labels,
        height: 32,
        width: 32,
        channels: 3,
    };
    ds.validate()?;
    Ok(ds)
}

/// BT.601 luma conversion of a channel-planar RGB dataset.
pub fn to_grayscale(ds: &Dataset) -> Result<Dataset> {
    if ds.channels != 3 {
        return Err(Error::Usage(format!(
            "grayscale conversion needs 3 channels, got {}",
            ds.channels
        )));
    }
    let hw = ds.height * ds.width;
    let images = ds
        .images
        .iter()
        .map(|img| {
            (0..hw)
                .map(|p| 0.299 * img[p] + 0.587 * img[hw + p] + 0.114 * img[2 * hw + p])
                .collect()
        })
        .collect();
    Ok(Dataset {
        images,
        labels: ds.labels.clone(),
        height: ds.height,
        width: ds.width,
        channels: 1,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StreamSpec {
    /// Fraction of classes known up front, in (0, 1).
    pub r: f64,
    pub seed: u64,
    /// Warm-up training instances drawn per known class.
    pub initial_per_class: usize,
    /// Optional cap on stream length, applied by proportional per-class
    /// subsampling before ordering.
    pub max_stream_len: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StreamManifest {
    pub seed: u64,
    pub r: f64,
    pub initial_per_class: usize,
    pub max_stream_len: Option<usize>,
    pub known_classes: Vec<Label>,
    pub novel_classes: Vec<Label>,
    /// Fractional onset position per novel class, in [0.1, 0.9).
    pub novel_onsets: Vec<(Label, f64)>,
    pub initial_len: usize,
    pub stream_len: usize,
}

#[derive(Debug, Clone)]
pub struct StreamInstance {
    /// Index into the source dataset; doubles as the oracle lookup key.
    pub instance_id: u64,
    pub features: Vec<f64>,
    pub label: Label,
}

#[derive(Debug, Clone)]
pub struct SimulatedStream {
    pub initial: Vec<(Vec<f64>, Label)>,
    pub stream: Vec<StreamInstance>,
    pub manifest: StreamManifest,
}

/// Splits a dataset into a warm-up training set over floor(n_classes * r)
/// seeded-uniformly chosen known classes plus an ordered stream of
/// everything else. Known-class instances are spread uniformly over the
/// whole stream; each novel class gets a seeded onset in the middle 80% and
/// its instances are spread uniformly from there to the end.
pub fn simulate_stream(ds: &Dataset, spec: &StreamSpec) -> Result<SimulatedStream> {
    ds.validate()?;
    if !(spec.r > 0.0 && spec.r < 1.0) {
        return Err(Error::Config(format!("r must be in (0,1), got {}", spec.r)));
    }
    let classes = ds.classes();
    let k = (classes.len() as f64 * spec.r).floor() as usize;
    if k < 2 {
        return Err(Error::Config(format!(
            "floor({} * {}) = {} known classes; training needs at least 2",
            classes.len(),
            spec.r,
            k
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut shuffled = classes.clone();
    shuffled.shuffle(&mut rng);
    let mut known: Vec<Label> = shuffled[..k].to_vec();
    known.sort_unstable();
    let novel: Vec<Label> = classes.iter().copied().filter(|c| !known.contains(c)).collect();

    let mut by_class: BTreeMap<Label, Vec<usize>> = BTreeMap::new();
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }

    let mut initial = Vec::new();
    // per-class shuffled pools; known classes give up their warm-up
    // instances first
    let mut pool: Vec<(Label, Vec<usize>)> = Vec::new();
    for &c in &known {
        let idxs = by_class.get_mut(&c).expect("class came from the label set");
        idxs.shuffle(&mut rng);
        if idxs.len() < spec.initial_per_class {
            return Err(Error::Config(format!(
                "class {} has {} instances, fewer than initial_per_class = {}",
                c,
                idxs.len(),
                spec.initial_per_class
            )));
        }
        for &i in &idxs[..spec.initial_per_class] {
            initial.push((ds.images[i].clone(), ds.labels[i]));
        }
        pool.push((c, idxs[spec.initial_per_class..].to_vec()));
    }
    for &c in &novel {
        let idxs = by_class.get_mut(&c).expect("class came from the label set");
        idxs.shuffle(&mut rng);
        pool.push((c, idxs.clone()));
    }

    if let Some(cap) = spec.max_stream_len {
        let total: usize = pool.iter().map(|(_, v)| v.len()).sum();
        if total > cap {
            let scale = cap as f64 / total as f64;
            for (_, v) in pool.iter_mut() {
                let keep = ((v.len() as f64 * scale).floor() as usize).max(1);
                v.truncate(keep);
            }
        }
    }

    let novel_onsets: Vec<(Label, f64)> = novel
        .iter()
        .map(|&c| (c, rng.gen_range(0.1..0.9)))
        .collect();

    // fractional position keys; sorting them realizes the ordering
    let mut keyed: Vec<(f64, usize)> = Vec::new();
    let mut instances: Vec<StreamInstance> = Vec::new();
    for (c, idxs) in &pool {
        let onset = novel_onsets
            .iter()
            .find(|(l, _)| l == c)
            .map_or(0.0, |&(_, o)| o);
        for &i in idxs {
            let key = rng.gen_range(onset..1.0);
            keyed.push((key, instances.len()));
            instances.push(StreamInstance {
                instance_id: i as u64,
                features: ds.images[i].clone(),
                label: ds.labels[i],
            });
        }
    }
    keyed.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let stream: Vec<StreamInstance> = keyed
        .into_iter()
        .map(|(_, i)| instances[i].clone())
        .collect();

    let manifest = StreamManifest {
        seed: spec.seed,
        r: spec.r,
        initial_per_class: spec.initial_per_class,
        max_stream_len: spec.max_stream_len,
        known_classes: known,
        novel_classes: novel,
        novel_onsets,
        initial_len: initial.len(),
        stream_len: stream.len(),
    };
    Ok(SimulatedStream {
        initial,
        stream,
        manifest,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitRatio {
    /// 4:2:4 train/validation/test.
    S1,
    /// 1:1:8 train/validation/test.
    S2,
}

impl SplitRatio {
    fn tenths(self) -> (usize, usize) {
        match self {
            SplitRatio::S1 => (4, 2),
            SplitRatio::S2 => (1, 1),
        }
    }
}

impl std::str::FromStr for SplitRatio {
    type Err = Error;
    fn from_str(s: &str) -> Result<SplitRatio> {
        match s.to_ascii_lowercase().as_str() {
            "s1" => Ok(SplitRatio::S1),
            "s2" => Ok(SplitRatio::S2),
            _ => Err(Error::Usage(format!("unknown split '{}', expected s1 or s2", s))),
        }
    }
}

/// Seeded shuffle then contiguous train/validation/test split. Returns
/// index triples; disjoint and exhaustive.
pub fn split_s1_s2(
    n: usize,
    ratio: SplitRatio,
    seed: u64,
) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (a, b) = ratio.tenths();
    let n_train = n * a / 10;
    let n_val = n * b / 10;
    let train = order[..n_train].to_vec();
    let val = order[n_train..n_train + n_val].to_vec();
    let test = order[n_train + n_val..].to_vec();
    (train, val, test)
}
