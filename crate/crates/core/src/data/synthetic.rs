//! Two-family synthetic image corpus. "Organic" classes are smooth
//! anisotropic blob constellations; "manufactured" classes are hard-edged
//! periodic or polygonal motifs. Each class owns one parameter draw and
//! every image re-renders it with small per-image jitter and pixel noise.

use std::f32::consts::PI;
use std::path::Path;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::nn::checkpoint::{decode_container, encode_container, read_file, write_atomic};
use crate::nn::Tensor;
use crate::seed::mix;

use super::{DataError, LabeledImage};

pub const DATA_MAGIC: [u8; 8] = *b"CNLDATA1";
pub const MIN_SIDE: usize = 8;
const NOISE_SIGMA: f32 = 0.04;
const SUPERSAMPLE: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Organic,
    Manufactured,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticParams {
    pub per_family: usize,
    pub per_class: usize,
    pub image_side: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticClass {
    pub class_id: u32,
    pub name: String,
    pub family: Family,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub params: SyntheticParams,
    pub classes: Vec<SyntheticClass>,
    pub images: Vec<LabeledImage>,
}

impl SyntheticDataset {
    pub fn images_of(&self, class_id: u32) -> impl Iterator<Item = &LabeledImage> {
        self.images
            .iter()
            .filter(move |img| img.class_id == class_id)
    }
}

#[derive(Debug, Clone, Copy)]
struct Blob {
    cx: f32,
    cy: f32,
    sx: f32,
    sy: f32,
    angle: f32,
    amp: f32,
}

#[derive(Debug, Clone)]
enum Motif {
    Blobs(Vec<Blob>),
    Stripes {
        angle: f32,
        period: f32,
    },
    Grid {
        period: f32,
        thickness: f32,
    },
    Frame {
        half_w: f32,
        half_h: f32,
        thickness: f32,
    },
    Checker {
        cell: f32,
    },
    Rings {
        spacing: f32,
    },
}

impl Motif {
    fn draw(family: Family, variant: usize, rng: &mut StdRng) -> Motif {
        match family {
            Family::Organic => {
                let n = rng.gen_range(2..=4);
                Motif::Blobs(
                    (0..n)
                        .map(|_| Blob {
                            cx: rng.gen_range(0.2..0.8),
                            cy: rng.gen_range(0.2..0.8),
                            sx: rng.gen_range(0.06..0.16),
                            sy: rng.gen_range(0.06..0.16),
                            angle: rng.gen_range(0.0..PI),
                            amp: rng.gen_range(0.5..1.0),
                        })
                        .collect(),
                )
            }
            Family::Manufactured => match variant % 5 {
                0 => Motif::Stripes {
                    angle: rng.gen_range(0.0..PI),
                    period: rng.gen_range(0.15..0.4),
                },
                1 => Motif::Grid {
                    period: rng.gen_range(0.2..0.4),
                    thickness: rng.gen_range(0.15..0.3),
                },
                2 => Motif::Frame {
                    half_w: rng.gen_range(0.2..0.4),
                    half_h: rng.gen_range(0.2..0.4),
                    thickness: rng.gen_range(0.06..0.12),
                },
                3 => Motif::Checker {
                    cell: rng.gen_range(0.15..0.35),
                },
                _ => Motif::Rings {
                    spacing: rng.gen_range(0.12..0.25),
                },
            },
        }
    }

    /// Applies per-image jitter and returns a renderable instance.
    fn jitter(&self, rng: &mut StdRng) -> (Motif, [f32; 2], f32) {
        let shift = [rng.gen_range(-0.06..0.06), rng.gen_range(-0.06..0.06)];
        let gain = rng.gen_range(0.75..1.0);
        let m = match self {
            Motif::Blobs(blobs) => Motif::Blobs(
                blobs
                    .iter()
                    .map(|b| Blob {
                        cx: b.cx + rng.gen_range(-0.03..0.03),
                        cy: b.cy + rng.gen_range(-0.03..0.03),
                        sx: b.sx * rng.gen_range(0.9..1.1),
                        sy: b.sy * rng.gen_range(0.9..1.1),
                        angle: b.angle + rng.gen_range(-0.15..0.15),
                        amp: b.amp * rng.gen_range(0.85..1.15),
                    })
                    .collect(),
            ),
            Motif::Stripes { angle, period } => Motif::Stripes {
                angle: angle + rng.gen_range(-0.08..0.08),
                period: *period,
            },
            other => other.clone(),
        };
        (m, shift, gain)
    }

    fn value(&self, u: f32, v: f32) -> f32 {
        let frac = |x: f32| x - x.floor();
        match self {
            Motif::Blobs(blobs) => blobs
                .iter()
                .map(|b| {
                    let (dx, dy) = (u - b.cx, v - b.cy);
                    let (s, c) = b.angle.sin_cos();
                    let r1 = (c * dx + s * dy) / b.sx;
                    let r2 = (-s * dx + c * dy) / b.sy;
                    b.amp * (-0.5 * (r1 * r1 + r2 * r2)).exp()
                })
                .sum::<f32>()
                .min(1.0),
            Motif::Stripes { angle, period } => {
                let (s, c) = angle.sin_cos();
                f32::from(frac((u * c + v * s) / period) < 0.5)
            }
            Motif::Grid { period, thickness } => {
                f32::from(frac(u / period) < *thickness || frac(v / period) < *thickness)
            }
            Motif::Frame {
                half_w,
                half_h,
                thickness,
            } => {
                let (dx, dy) = ((u - 0.5).abs(), (v - 0.5).abs());
                let outer = dx <= *half_w && dy <= *half_h;
                let inner = dx <= half_w - thickness && dy <= half_h - thickness;
                f32::from(outer && !inner)
            }
            Motif::Checker { cell } => {
                let parity = ((u / cell).floor() + (v / cell).floor()) as i64;
                f32::from(parity.rem_euclid(2) == 0)
            }
            Motif::Rings { spacing } => {
                let d = (u - 0.5).abs().max((v - 0.5).abs());
                f32::from(frac(d / spacing) < 0.5)
            }
        }
    }
}

fn render(motif: &Motif, side: usize, rng: &mut StdRng) -> Tensor {
    let (inst, shift, gain) = motif.jitter(rng);
    let noise = Normal::new(0.0f32, NOISE_SIGMA).expect("valid sigma");
    let mut data = Vec::with_capacity(side * side);
    let step = 1.0 / (side * SUPERSAMPLE) as f32;
    for y in 0..side {
        for x in 0..side {
            let mut acc = 0.0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let u = (x * SUPERSAMPLE + sx) as f32 * step + step * 0.5 - shift[0];
                    let v = (y * SUPERSAMPLE + sy) as f32 * step + step * 0.5 - shift[1];
                    acc += inst.value(u, v);
                }
            }
            let mean = acc / (SUPERSAMPLE * SUPERSAMPLE) as f32;
            data.push((mean * gain + noise.sample(rng)).clamp(0.0, 1.0));
        }
    }
    Tensor::new(vec![side, side, 1], data).expect("finite pixels")
}

/// Generates `2 * per_family` classes: ids `0..per_family` are organic,
/// the rest manufactured. Deterministic given `seed`.
pub fn generate_synthetic(
    per_family: usize,
    per_class: usize,
    image_side: usize,
    seed: u64,
) -> Result<SyntheticDataset, DataError> {
    if image_side < MIN_SIDE {
        return Err(DataError::TooSmall {
            side: image_side,
            min: MIN_SIDE,
        });
    }
    if per_family == 0 || per_class == 0 {
        return Err(DataError::Invalid(
            "class and image counts must be >= 1".into(),
        ));
    }
    let mut classes = Vec::with_capacity(2 * per_family);
    let mut images = Vec::with_capacity(2 * per_family * per_class);
    for (fi, family) in [Family::Organic, Family::Manufactured]
        .into_iter()
        .enumerate()
    {
        for variant in 0..per_family {
            let class_id = (fi * per_family + variant) as u32;
            let name = match family {
                Family::Organic => format!("organic-{variant:02}"),
                Family::Manufactured => format!("manufactured-{variant:02}"),
            };
            let mut class_rng = StdRng::seed_from_u64(mix(&[seed, 0xC1A55, class_id as u64]));
            let motif = Motif::draw(family, variant, &mut class_rng);
            for i in 0..per_class {
                let mut rng = StdRng::seed_from_u64(mix(&[seed, class_id as u64, i as u64]));
                images.push(LabeledImage {
                    pixels: render(&motif, image_side, &mut rng),
                    class_id,
                    class_name: name.clone(),
                });
            }
            classes.push(SyntheticClass {
                class_id,
                name,
                family,
            });
        }
    }
    Ok(SyntheticDataset {
        params: SyntheticParams {
            per_family,
            per_class,
            image_side,
            seed,
        },
        classes,
        images,
    })
}

#[derive(Serialize, Deserialize)]
struct DataHeader {
    format_version: u32,
    params: SyntheticParams,
    classes: Vec<SyntheticClass>,
    item_shape: Vec<usize>,
    labels: Vec<u32>,
}

pub fn save_dataset(dataset: &SyntheticDataset, path: &Path) -> Result<(), DataError> {
    let item_shape = dataset
        .images
        .first()
        .map(|i| i.pixels.shape().to_vec())
        .unwrap_or_default();
    let header = DataHeader {
        format_version: crate::nn::checkpoint::FORMAT_VERSION,
        params: dataset.params,
        classes: dataset.classes.clone(),
        item_shape,
        labels: dataset.images.iter().map(|i| i.class_id).collect(),
    };
    let payload: Vec<&[f32]> = dataset.images.iter().map(|i| i.pixels.data()).collect();
    let bytes = encode_container(&DATA_MAGIC, &header, &payload)?;
    Ok(write_atomic(path, &bytes)?)
}

pub fn load_dataset(path: &Path) -> Result<SyntheticDataset, DataError> {
    let bytes = read_file(path)?;
    let (header, payload): (DataHeader, Vec<f32>) = decode_container(&DATA_MAGIC, &bytes)?;
    let item: usize = header.item_shape.iter().product();
    if payload.len() != item * header.labels.len() {
        return Err(DataError::Invalid(format!(
            "dataset payload has {} floats, expected {}",
            payload.len(),
            item * header.labels.len()
        )));
    }
    let names: std::collections::BTreeMap<u32, &str> = header
        .classes
        .iter()
        .map(|c| (c.class_id, c.name.as_str()))
        .collect();
    let mut images = Vec::with_capacity(header.labels.len());
    for (i, &class_id) in header.labels.iter().enumerate() {
        let name = names
            .get(&class_id)
            .ok_or_else(|| DataError::Invalid(format!("unknown class id {class_id}")))?;
        images.push(LabeledImage::new(
            Tensor::new(
                header.item_shape.clone(),
                payload[i * item..(i + 1) * item].to_vec(),
            )?,
            class_id,
            name,
        )?);
    }
    Ok(SyntheticDataset {
        params: header.params,
        classes: header.classes,
        images,
    })
}
