//! Dataset generation and ingestion: the 2-D four-blob toy task, IDX-format
//! MNIST parsing for desk-scale subsets, and the bias-lifted two-layer
//! fixture network.

use std::io::Write;
use std::path::Path;

use byteorder::{BigEndian, ByteOrder};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{DenseLayer, Network};
use crate::oracle::seeded_rng;

/// Labeled classification data; labels are 1-based in `1..=num_classes`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(inputs: Vec<Vec<f64>>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::InvalidDataset(format!(
                "{} inputs vs {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        if labels.iter().any(|&y| y == 0 || y > num_classes) {
            return Err(Error::InvalidDataset(format!(
                "labels must lie in 1..={num_classes}"
            )));
        }
        if inputs
            .iter()
            .any(|x| x.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::InvalidDataset("non-finite feature".into()));
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    /// Write `x…, y` rows for plotting.
    pub fn export_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        for (x, y) in self.inputs.iter().zip(&self.labels) {
            let row: Vec<String> = x.iter().map(|v| format!("{v}")).collect();
            writeln!(f, "{},{}", row.join(","), y)?;
        }
        Ok(())
    }

    /// Read `x…, y` rows written by [`Dataset::export_csv`]; the class count
    /// is the maximum label seen.
    pub fn import_csv(path: &Path) -> Result<Dataset> {
        let text = std::fs::read_to_string(path)?;
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() < 2 {
                return Err(Error::InvalidDataset(format!(
                    "line {}: need at least one feature and a label",
                    lineno + 1
                )));
            }
            let parse = |s: &str| -> Result<f64> {
                s.trim().parse().map_err(|_| {
                    Error::InvalidDataset(format!("line {}: bad number '{s}'", lineno + 1))
                })
            };
            let x: Vec<f64> = fields[..fields.len() - 1]
                .iter()
                .map(|s| parse(s))
                .collect::<Result<_>>()?;
            let y: usize = fields[fields.len() - 1].trim().parse().map_err(|_| {
                Error::InvalidDataset(format!("line {}: bad label", lineno + 1))
            })?;
            inputs.push(x);
            labels.push(y);
        }
        let num_classes = labels.iter().copied().max().unwrap_or(0);
        Dataset::new(inputs, labels, num_classes)
    }
}

const TOY_CENTERS: [(f64, f64); 4] = [(2.0, 2.0), (-2.0, 2.0), (-2.0, -2.0), (2.0, -2.0)];
const TOY_SIGMA: f64 = 0.6;

/// Four balanced Gaussian blobs in 2-D at (±2, ±2) with σ = 0.6; class of
/// point i is `i mod 4 + 1`, so any n divisible by 4 is exactly balanced.
/// Deterministic per seed.
pub fn toy_dataset(n: usize, seed: u64) -> Result<Dataset> {
    if n < 4 {
        return Err(Error::InvalidConfig("toy dataset needs n >= 4".into()));
    }
    let mut rng = seeded_rng(seed);
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 4;
        let (cx, cy) = TOY_CENTERS[class];
        let (gx, gy) = gaussian_pair(&mut rng);
        inputs.push(vec![cx + TOY_SIGMA * gx, cy + TOY_SIGMA * gy]);
        labels.push(class + 1);
    }
    Dataset::new(inputs, labels, 4)
}

/// Box–Muller from the seeded stream (keeps the generator dependency-free
/// and bit-stable across releases).
fn gaussian_pair(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    let r = (-2.0 * u1.ln()).sqrt();
    let theta = 2.0 * std::f64::consts::PI * u2;
    (r * theta.cos(), r * theta.sin())
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    if bytes.len() < offset + 4 {
        return Err(Error::Parse {
            offset,
            message: format!("truncated while reading {what}"),
        });
    }
    Ok(BigEndian::read_u32(&bytes[offset..offset + 4]))
}

/// Load an MNIST IDX image/label pair: pixels scaled to [0, 1] by /255,
/// flattened row-major; labels 0–9 shifted to 1–10. `limit` truncates.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path, limit: usize) -> Result<Dataset> {
    let img_bytes = std::fs::read(images_path)?;
    let lbl_bytes = std::fs::read(labels_path)?;

    let magic = read_u32(&img_bytes, 0, "image magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: format!("bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let count = read_u32(&img_bytes, 4, "image count")? as usize;
    let rows = read_u32(&img_bytes, 8, "row count")? as usize;
    let cols = read_u32(&img_bytes, 12, "column count")? as usize;
    let expected = 16 + count * rows * cols;
    if img_bytes.len() != expected {
        return Err(Error::Parse {
            offset: img_bytes.len().min(expected),
            message: format!(
                "image payload is {} bytes, header implies {expected}",
                img_bytes.len()
            ),
        });
    }

    let magic = read_u32(&lbl_bytes, 0, "label magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: format!("bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let lbl_count = read_u32(&lbl_bytes, 4, "label count")? as usize;
    if lbl_bytes.len() != 8 + lbl_count {
        return Err(Error::Parse {
            offset: lbl_bytes.len().min(8 + lbl_count),
            message: format!(
                "label payload is {} bytes, header implies {}",
                lbl_bytes.len(),
                8 + lbl_count
            ),
        });
    }
    if lbl_count != count {
        return Err(Error::Parse {
            offset: 4,
            message: format!("{count} images but {lbl_count} labels"),
        });
    }

    let take = limit.min(count);
    let pixels = rows * cols;
    let mut inputs = Vec::with_capacity(take);
    let mut labels = Vec::with_capacity(take);
    for i in 0..take {
        let start = 16 + i * pixels;
        inputs.push(
            img_bytes[start..start + pixels]
                .iter()
                .map(|&b| b as f64 / 255.0)
                .collect(),
        );
        let raw = lbl_bytes[8 + i];
        if raw > 9 {
            return Err(Error::Parse {
                offset: 8 + i,
                message: format!("label byte {raw} out of range 0..=9"),
            });
        }
        labels.push(raw as usize + 1);
    }
    Dataset::new(inputs, labels, 10)
}

/// The two-layer bias-lifted fixture: 3 inputs (two data coordinates plus a
/// constant 1), widths 3 then 4, zero biases, read as K = 2 regular plus
/// M = 2 abstain outputs.
pub fn fixture_appendix_f() -> Network {
    let w1 = vec![
        vec![0.557, -0.296, -0.449],
        vec![-0.474, -0.504, 0.894],
        vec![-0.0208, 0.0679, 0.901],
    ];
    let w2 = vec![
        vec![0.817, -0.376, 0.36],
        vec![0.524, 0.530, 0.0557],
        vec![0.0753, 0.191, 0.744],
        vec![-0.547, 0.660, -0.718],
    ];
    let layers = vec![
        DenseLayer::from_rows(w1, vec![0.0; 3]).expect("fixture layer 1"),
        DenseLayer::from_rows(w2, vec![0.0; 4]).expect("fixture layer 2"),
    ];
    Network::new(layers, 2, 2).expect("fixture network")
}

/// Input region for the fixture: ball of radius `eps` on the two data
/// coordinates, the lifted constant coordinate pinned at 1.
pub fn fixture_region(x1: f64, x2: f64, eps: f64) -> Result<crate::bounds::InputRegion> {
    crate::bounds::InputRegion::with_frozen(vec![x1, x2, 1.0], eps, &[2])
}
