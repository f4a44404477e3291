//! Image classification datasets: CIFAR-10 binary batches and a synthetic
//! teacher-labelled set.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use updp_tensor::{Activation, Element, Tensor};

use crate::error::{Error, Result};
use crate::graph::{init_params, LayerKind, Segment, SegmentBuilder, Src};

/// Images stored as `f32` in `[N, C, H, W]` order.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub shape: [usize; 3],
    pub data: Vec<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(shape: [usize; 3], data: Vec<f32>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let per: usize = shape.iter().product();
        if data.len() != per * labels.len() {
            return Err(Error::Data(format!("{} values for {} images of {shape:?}", data.len(), labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!("label {bad} outside {classes} classes")));
        }
        Ok(Dataset {
            shape,
            data,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.shape != other.shape || self.classes != other.classes {
            return Err(Error::Data(format!(
                "cannot concatenate {:?}/{} with {:?}/{}",
                self.shape, self.classes, other.shape, other.classes
            )));
        }
        let mut out = self.clone();
        out.data.extend_from_slice(&other.data);
        out.labels.extend_from_slice(&other.labels);
        Ok(out)
    }

    fn per_image(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let per = self.per_image();
        &self.data[i * per..(i + 1) * per]
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        let mut data = Vec::with_capacity(idx.len() * self.per_image());
        for &i in idx {
            data.extend_from_slice(self.image(i));
        }
        Dataset {
            shape: self.shape,
            data,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    /// First `n` samples and the rest.
    pub fn split(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.len());
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        (self.select(&head), self.select(&tail))
    }

    /// A batch tensor and its labels.
    pub fn batch<T: Element>(&self, idx: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let mut data = Vec::with_capacity(idx.len() * self.per_image());
        for &i in idx {
            data.extend(self.image(i).iter().map(|&v| T::from_f64(v as f64)));
        }
        let shape = vec![idx.len(), self.shape[0], self.shape[1], self.shape[2]];
        (Tensor::new(shape, data).expect("consistent batch"), idx.iter().map(|&i| self.labels[i]).collect())
    }

    /// Samples per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

/// Random horizontal flip and random crop from a zero-padded image, applied in place.
pub fn augment<T: Element, R: Rng + ?Sized>(batch: &mut Tensor<T>, pad: usize, rng: &mut R) {
    let (n, c, h, w) = (batch.dim(0), batch.dim(1), batch.dim(2), batch.dim(3));
    let per = c * h * w;
    let mut scratch = vec![T::zero(); per];
    for i in 0..n {
        let flip = rng.gen_bool(0.5);
        let dy = rng.gen_range(0..=2 * pad) as isize - pad as isize;
        let dx = rng.gen_range(0..=2 * pad) as isize - pad as isize;
        let img = &mut batch.data_mut()[i * per..(i + 1) * per];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let sy = y as isize + dy;
                    let sx0 = x as isize + dx;
                    let sx = if flip { w as isize - 1 - sx0 } else { sx0 };
                    let v = if sy < 0 || sy >= h as isize || sx0 < 0 || sx0 >= w as isize {
                        T::zero()
                    } else {
                        img[ch * h * w + sy as usize * w + sx as usize]
                    };
                    scratch[ch * h * w + y * w + x] = v;
                }
            }
        }
        img.copy_from_slice(&scratch);
    }
}

const CIFAR_SIDE: usize = 32;
const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;

/// Parses CIFAR-10 binary records (one label byte, 3072 channel-major pixel
/// bytes). Pixels are scaled to `[0, 1]`, then standardized per channel.
pub fn parse_cifar10_binary(bytes: &[u8]) -> Result<Dataset> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Data(format!(
            "{} bytes is not a whole number of {CIFAR_RECORD}-byte CIFAR-10 records",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * 3 * plane);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(Error::Data(format!("record {i} has label {}", rec[0])));
        }
        labels.push(rec[0] as usize);
        data.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    for ch in 0..3 {
        let values = || (0..n).flat_map(move |i| (0..plane).map(move |p| i * 3 * plane + ch * plane + p));
        let count = (n * plane) as f64;
        let mean = values().map(|j| data[j] as f64).sum::<f64>() / count;
        let var = values().map(|j| (data[j] as f64 - mean).powi(2)).sum::<f64>() / count;
        let std = var.sqrt().max(1e-8);
        for j in values() {
            data[j] = ((data[j] as f64 - mean) / std) as f32;
        }
    }
    Dataset::new([3, CIFAR_SIDE, CIFAR_SIDE], data, labels, 10)
}

pub fn load_cifar10_binary(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    parse_cifar10_binary(&bytes)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub samples_per_class: usize,
    pub image_size: usize,
    pub seed: u64,
}

const TEACHER_WIDTH: usize = 16;
/// Low-resolution grid the smooth part of each image is interpolated from.
const COARSE: usize = 4;
/// Candidates whose top-two teacher margin falls below this fraction of the
/// logit spread are discarded.
const MARGIN: f64 = 0.25;

/// The frozen teacher: two strided convolutions, pooling and a linear readout.
pub fn teacher(classes: usize) -> Segment {
    let w = TEACHER_WIDTH;
    let mut b = SegmentBuilder::new("teacher");
    let c1 = b.conv("conv1", Src::Input, 3, w, 5, 2, 2, 1, true);
    let a1 = b.act("act1", c1, Activation::Relu);
    let c2 = b.conv("conv2", a1, w, w, 3, 2, 1, 1, true);
    let a2 = b.act("act2", c2, Activation::Relu);
    let p = b.simple("pool", LayerKind::GlobalAvgPool, a2);
    let fc = b.linear("fc", p, w, classes);
    b.finish(fc)
}

/// Smooth random image: bilinear upsampling of coarse noise plus fine noise.
fn smooth_image<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Vec<f32> {
    let mut out = Vec::with_capacity(3 * size * size);
    for _ in 0..3 {
        let coarse: Vec<f64> = (0..COARSE * COARSE).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let at = |y: usize, x: usize| coarse[y.min(COARSE - 1) * COARSE + x.min(COARSE - 1)];
        for y in 0..size {
            for x in 0..size {
                let fy = y as f64 * (COARSE - 1) as f64 / (size.max(2) - 1) as f64;
                let fx = x as f64 * (COARSE - 1) as f64 / (size.max(2) - 1) as f64;
                let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
                let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
                let v = at(y0, x0) * (1.0 - ty) * (1.0 - tx)
                    + at(y0, x0 + 1) * (1.0 - ty) * tx
                    + at(y0 + 1, x0) * ty * (1.0 - tx)
                    + at(y0 + 1, x0 + 1) * ty * tx;
                out.push((v + 0.2 * rng.gen_range(-1.0..1.0)) as f32);
            }
        }
    }
    out
}

/// Class-balanced dataset labelled by the argmax of a random frozen teacher.
/// Logits are centered and scaled per class over a calibration pool so every
/// class is reachable; low-margin candidates are rejected.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.classes < 2 || spec.samples_per_class == 0 || spec.image_size < 4 {
        return Err(Error::Data(format!("degenerate synthetic spec {spec:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let net = teacher(spec.classes);
    let params = init_params::<f64, _>([&net], &mut rng)?;
    let size = spec.image_size;
    let per = 3 * size * size;
    let score = |images: &[f32]| -> Result<Tensor<f64>> {
        let n = images.len() / per;
        let x = Tensor::new(vec![n, 3, size, size], images.iter().map(|&v| v as f64).collect())?;
        crate::graph::predict(&net, &params, &x)
    };
    let pool: usize = 64 * spec.classes;
    let calib: Vec<f32> = (0..pool).flat_map(|_| smooth_image(size, &mut rng)).collect();
    let logits = score(&calib)?;
    let k = spec.classes;
    let mut mean = vec![0.0; k];
    let mut std = vec![0.0; k];
    for c in 0..k {
        let col: Vec<f64> = (0..pool).map(|i| logits.data()[i * k + c]).collect();
        mean[c] = col.iter().sum::<f64>() / pool as f64;
        std[c] = (col.iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>() / pool as f64).sqrt().max(1e-12);
    }

    let mut buckets: Vec<Vec<Vec<f32>>> = vec![Vec::new(); k];
    let need = spec.samples_per_class;
    let budget = 200 * need * k;
    let mut drawn = 0;
    const CHUNK: usize = 256;
    while buckets.iter().any(|b| b.len() < need) {
        if drawn >= budget {
            let counts: Vec<usize> = buckets.iter().map(Vec::len).collect();
            return Err(Error::Data(format!("teacher labels too unbalanced after {drawn} draws: {counts:?}")));
        }
        let imgs: Vec<Vec<f32>> = (0..CHUNK).map(|_| smooth_image(size, &mut rng)).collect();
        drawn += CHUNK;
        let flat: Vec<f32> = imgs.iter().flatten().copied().collect();
        let out = score(&flat)?;
        for (i, img) in imgs.into_iter().enumerate() {
            let mut z: Vec<(f64, usize)> = (0..k).map(|c| ((out.data()[i * k + c] - mean[c]) / std[c], c)).collect();
            z.sort_by(|a, b| b.0.total_cmp(&a.0));
            if z[0].0 - z[1].0 < MARGIN {
                continue;
            }
            let label = z[0].1;
            if buckets[label].len() < need {
                buckets[label].push(img);
            }
        }
    }
    let mut order: Vec<(usize, Vec<f32>)> = buckets
        .into_iter()
        .enumerate()
        .flat_map(|(c, imgs)| imgs.into_iter().map(move |img| (c, img)))
        .collect();
    order.shuffle(&mut rng);
    let labels = order.iter().map(|(c, _)| *c).collect();
    let data = order.into_iter().flat_map(|(_, img)| img).collect();
    Dataset::new([3, size, size], data, labels, k)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, fill: u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend(std::iter::repeat(fill).take(CIFAR_RECORD - 1));
        r
    }

    #[test]
    fn cifar_records_parse() {
        let mut bytes = record(3, 10);
        bytes.extend(record(9, 200));
        let d = parse_cifar10_binary(&bytes).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.labels, vec![3, 9]);
        assert!(d.image(0)[0] < 0.0 && d.image(1)[0] > 0.0);
        assert!(parse_cifar10_binary(&bytes[..bytes.len() - 1]).is_err());
        assert!(parse_cifar10_binary(&record(10, 0)).is_err());
    }

    #[test]
    fn synthetic_is_balanced_and_deterministic() {
        let spec = SyntheticSpec {
            classes: 4,
            samples_per_class: 10,
            image_size: 16,
            seed: 3,
        };
        let a = generate_synthetic(&spec).unwrap();
        assert_eq!(a.class_counts(), vec![10; 4]);
        assert_eq!(a, generate_synthetic(&spec).unwrap());
        let b = generate_synthetic(&SyntheticSpec { seed: 4, ..spec }).unwrap();
        assert_ne!(a.data, b.data);
    }

    #[test]
    fn augmentation_keeps_shape_and_zero_pads() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut x = Tensor::<f32>::ones(vec![8, 1, 6, 6]);
        augment(&mut x, 2, &mut rng);
        assert_eq!(x.shape(), &[8, 1, 6, 6]);
        assert!(x.data().iter().all(|&v| v == 0.0 || v == 1.0));
        let mut y = Tensor::<f32>::from_fn(vec![1, 1, 4, 4], |i| i as f32);
        augment(&mut y, 0, &mut rng);
        let mut sorted = y.data().to_vec();
        sorted.sort_by(f32::total_cmp);
        assert_eq!(sorted, (0..16).map(|i| i as f32).collect::<Vec<_>>());
    }
}
