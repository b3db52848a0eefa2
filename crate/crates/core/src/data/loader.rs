use std::thread;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::augment::{augment, decode_image, AugmentConfig, DecodedImage, Mode};
use super::DatasetManifest;
use crate::attention::Targets;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Environment variable holding the number of data workers.
pub const WORKERS_ENV: &str = "ATX_WORKERS";

/// Worker count from the environment, defaulting to 1.
pub fn worker_count() -> Result<usize> {
    match std::env::var(WORKERS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Config(format!("{WORKERS_ENV}={v:?} is not a positive integer"))),
        },
    }
}

/// Generator for one sample's augmentation, fixed by `(seed, epoch, index)`
/// and independent of which worker draws it.
pub fn sample_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) ^ index as u64);
    rng
}

/// Runs `f` over `items` on up to `workers` scoped threads, keeping order.
fn par_map<I: Sync, O: Send>(items: &[I], workers: usize, f: impl Fn(&I) -> Result<O> + Sync) -> Result<Vec<O>> {
    if workers <= 1 || items.len() < 2 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    thread::scope(|s| {
        let handles: Vec<_> = items.chunks(chunk).map(|c| s.spawn(|| c.iter().map(&f).collect::<Result<Vec<O>>>())).collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().map_err(|_| Error::invalid("data worker panicked"))??);
        }
        Ok(out)
    })
}

/// A manifest with every image decoded in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    images: Vec<DecodedImage>,
}

impl Dataset {
    pub fn load(manifest: DatasetManifest, workers: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..manifest.len()).collect();
        let images = par_map(&idx, workers, |&i| decode_image(&manifest.image_path(i)))?;
        Ok(Self { manifest, images })
    }

    pub fn from_parts(manifest: DatasetManifest, images: Vec<DecodedImage>) -> Result<Self> {
        if manifest.len() != images.len() {
            return Err(Error::invalid(format!("{} images for {} records", images.len(), manifest.len())));
        }
        Ok(Self { manifest, images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image(&self, index: usize) -> &DecodedImage {
        &self.images[index]
    }

    /// Augmented `[N, 3, S, S]` batch and its targets. Each sample's
    /// randomness comes from [`sample_rng`] with its manifest index.
    pub fn batch(
        &self,
        indices: &[usize],
        mode: Mode,
        cfg: &AugmentConfig,
        seed: u64,
        epoch: usize,
        workers: usize,
    ) -> Result<(Tensor<f32>, Targets)> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::invalid(format!("record {bad} out of range 0..{}", self.len())));
        }
        let samples = par_map(indices, workers, |&i| {
            let mut rng = sample_rng(seed, epoch, i);
            augment(&self.images[i], mode, cfg, &mut rng)
        })?;
        Ok((Tensor::stack(&samples)?, self.manifest.targets(indices)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tests::manifest_from_counts;

    fn dataset(n: usize) -> Dataset {
        let m = manifest_from_counts(&vec![1; n]);
        let images = (0..n)
            .map(|i| DecodedImage::new(12, 10, 1, (0..120).map(|j| ((i * 31 + j * 7) % 256) as u8).collect()).unwrap())
            .collect();
        Dataset::from_parts(m, images).unwrap()
    }

    #[test]
    fn batches_independent_of_worker_count() {
        let d = dataset(7);
        let cfg = AugmentConfig::with_size(8);
        let idx = [6, 0, 3, 2, 5];
        let (a, ta) = d.batch(&idx, Mode::Train, &cfg, 11, 2, 1).unwrap();
        let (b, tb) = d.batch(&idx, Mode::Train, &cfg, 11, 2, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        assert_eq!(a.shape(), &[5, 3, 8, 8]);
        // a sample does not depend on its batch neighbours
        let (single, _) = d.batch(&[3], Mode::Train, &cfg, 11, 2, 1).unwrap();
        let per = 3 * 64;
        assert_eq!(&a.data()[2 * per..3 * per], single.data());
        let (other_epoch, _) = d.batch(&[3], Mode::Train, &cfg, 11, 3, 1).unwrap();
        assert_ne!(single, other_epoch);
    }

    #[test]
    fn sample_streams_differ() {
        use rand::Rng;
        let a: u64 = sample_rng(1, 0, 0).random();
        let b: u64 = sample_rng(1, 0, 1).random();
        let c: u64 = sample_rng(1, 1, 0).random();
        assert!(a != b && a != c && b != c);
        assert_eq!(a, sample_rng(1, 0, 0).random::<u64>());
    }
}
