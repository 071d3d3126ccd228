use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::render::{render, DomainSpec, Style, CHANNELS, IMAGE_SIZE, NUM_CLASSES};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Added to the per-channel standard deviation when standardizing inputs,
/// so flat channels map to zeros instead of blowing up.
pub const STD_FLOOR: f64 = 0.05;

/// Labeled images of one domain, with generator-truth foreground masks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DomainDataset {
    pub domain: String,
    pub style: Style,
    pub seed: u64,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// `count * C * H * W` bytes, each example channel-major.
    pub images: Vec<u8>,
    pub labels: Vec<usize>,
    /// `count * H * W` flags.
    pub masks: Vec<bool>,
}

impl DomainDataset {
    /// Renders `num_per_class` examples of every class. Labels cycle through
    /// the classes, so any prefix of `7k` examples is balanced.
    pub fn generate(spec: &DomainSpec, num_per_class: usize, seed: u64) -> Result<Self> {
        if num_per_class == 0 {
            return Err(Error::Input("num_per_class must be positive".into()));
        }
        let count = num_per_class * NUM_CLASSES;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut images = Vec::with_capacity(count * CHANNELS * IMAGE_SIZE * IMAGE_SIZE);
        let mut masks = Vec::with_capacity(count * IMAGE_SIZE * IMAGE_SIZE);
        let mut labels = Vec::with_capacity(count);
        for i in 0..count {
            let class = i % NUM_CLASSES;
            let r = render(spec, class, &mut rng);
            images.extend_from_slice(&r.pixels);
            masks.extend_from_slice(&r.mask);
            labels.push(class);
        }
        Ok(Self {
            domain: spec.name.clone(),
            style: spec.style,
            seed,
            channels: CHANNELS,
            height: IMAGE_SIZE,
            width: IMAGE_SIZE,
            images,
            labels,
            masks,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn mask(&self, i: usize) -> &[bool] {
        let n = self.height * self.width;
        &self.masks[i * n..(i + 1) * n]
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0; NUM_CLASSES];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// `[B, C, H, W]` model input for the given examples. Pixels are mapped
    /// to `[-1, 1]`, then every channel of every image is standardized with
    /// its own mean and standard deviation (plus [`STD_FLOOR`]).
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let n = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Input(format!(
                    "index {i} out of range for {}",
                    self.len()
                )));
            }
            self.push_input(i, &mut data);
        }
        Tensor::new(
            vec![indices.len(), self.channels, self.height, self.width],
            data,
        )
    }

    /// Appends the standardized model input of example `i` to `out`.
    pub fn push_input(&self, i: usize, out: &mut Vec<f64>) {
        let plane = self.height * self.width;
        for channel in self.image(i).chunks_exact(plane) {
            // centre in pixel units from an exact integer sum, so a flat
            // channel maps to exactly zero
            let mean = channel.iter().map(|&p| u64::from(p)).sum::<u64>() as f64 / plane as f64;
            let centred: Vec<f64> = channel
                .iter()
                .map(|&p| (f64::from(p) - mean) / 127.5)
                .collect();
            let var = centred.iter().map(|v| v * v).sum::<f64>() / plane as f64;
            let scale = 1.0 / (var.sqrt() + STD_FLOOR);
            out.extend(centred.iter().map(|v| v * scale));
        }
    }

    pub fn labels_of(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    /// A copy with every byte of image content replaced by `fill`.
    pub fn with_images_filled(&self, fill: u8) -> Self {
        Self {
            images: vec![fill; self.images.len()],
            ..self.clone()
        }
    }
}
