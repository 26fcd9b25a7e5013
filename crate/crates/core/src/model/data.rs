//! Synthetic identity dataset: each identity is a fixed random template
//! map, and each sample is that template under a circular spatial shift,
//! camera-dependent noise, and an occasional occlusion patch. Alternating
//! samples come from two "cameras" with different noise levels, so
//! retrieval across cameras is non-trivial but solvable.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Which split a sample belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Query,
    Gallery,
}

/// Dataset shape and corruption settings.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    /// Number of identities; also the label space of the classifier.
    pub classes: usize,
    /// Samples drawn per identity.
    pub per_identity: usize,
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    /// Base noise level; camera 1 doubles it.
    pub noise: f64,
    /// Probability that a sample gets an occlusion patch zeroed out.
    pub occlusion_prob: f64,
    /// Maximum circular shift in either spatial direction.
    pub shift_max: usize,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("dataset needs at least 2 identities".into()));
        }
        if self.per_identity < 4 {
            return Err(Error::Config(
                "dataset needs at least 4 samples per identity to fill all splits".into(),
            ));
        }
        for (name, v) in [("channels", self.channels), ("h", self.h), ("w", self.w)] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.noise < 0.0 {
            return Err(Error::Config(format!("noise {} must be >= 0", self.noise)));
        }
        if !(0.0..=1.0).contains(&self.occlusion_prob) {
            return Err(Error::Config(format!(
                "occlusion_prob {} must lie in [0, 1]",
                self.occlusion_prob
            )));
        }
        Ok(())
    }
}

/// One generated sample.
#[derive(Clone, Debug)]
pub struct Sample {
    pub features: Tensor,
    pub id: usize,
    pub camera: usize,
    pub split: Split,
}

/// The generated dataset; samples are ordered by identity, then by draw
/// index within the identity.
#[derive(Clone, Debug)]
pub struct Dataset {
    cfg: SynthConfig,
    samples: Vec<Sample>,
}

/// Split boundaries for one identity's `n` samples: the final tenth
/// (at least one) queries, the final three tenths before that (at least
/// one) gallery, everything earlier trains. Consecutive samples alternate
/// cameras, so the query block always has opposite-camera gallery
/// neighbors — every query is guaranteed a cross-camera match.
fn split_of(sample_idx: usize, n: usize) -> Split {
    let q = (n / 10).max(1);
    let g = (3 * n / 10).max(1);
    let t = n - q - g;
    if sample_idx < t {
        Split::Train
    } else if sample_idx < t + q {
        Split::Query
    } else {
        Split::Gallery
    }
}

impl Dataset {
    /// Deterministically generates the dataset for a seed.
    pub fn generate(cfg: &SynthConfig, seed: u64) -> Result<Dataset> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = [cfg.channels, cfg.h, cfg.w];
        let templates: Vec<Tensor> =
            (0..cfg.classes).map(|_| Tensor::randn(&shape, &mut rng)).collect();
        let mut samples = Vec::with_capacity(cfg.classes * cfg.per_identity);
        for (id, template) in templates.iter().enumerate() {
            for s in 0..cfg.per_identity {
                let camera = s % 2;
                let features = corrupt(template, cfg, camera, &mut rng);
                samples.push(Sample {
                    features,
                    id,
                    camera,
                    split: split_of(s, cfg.per_identity),
                });
            }
        }
        Ok(Dataset { cfg: cfg.clone(), samples })
    }

    pub fn cfg(&self) -> &SynthConfig {
        &self.cfg
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Samples of one split, in dataset order.
    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn train(&self) -> Vec<&Sample> {
        self.split(Split::Train)
    }

    pub fn query(&self) -> Vec<&Sample> {
        self.split(Split::Query)
    }

    pub fn gallery(&self) -> Vec<&Sample> {
        self.split(Split::Gallery)
    }

    /// Indices (into `samples`) of one split.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == split)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Applies shift → noise → occlusion to a template.
fn corrupt(template: &Tensor, cfg: &SynthConfig, camera: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let (c, h, w) = (cfg.channels, cfg.h, cfg.w);
    let max = cfg.shift_max as i64;
    let dr = rng.gen_range(-max..=max);
    let dc = rng.gen_range(-max..=max);
    let mut out = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        for r in 0..h {
            for col in 0..w {
                let sr = (r as i64 - dr).rem_euclid(h as i64) as usize;
                let sc = (col as i64 - dc).rem_euclid(w as i64) as usize;
                out.set(&[ch, r, col], template.at(&[ch, sr, sc]));
            }
        }
    }
    let sigma = cfg.noise * (1 + camera) as f64;
    if sigma > 0.0 {
        for v in out.data_mut() {
            let n: f64 = rng.sample(StandardNormal);
            *v += sigma * n;
        }
    }
    if cfg.occlusion_prob > 0.0 && rng.gen::<f64>() < cfg.occlusion_prob {
        let ph = (h / 4).max(1);
        let pw = (w / 4).max(1);
        let r0 = rng.gen_range(0..=h - ph);
        let c0 = rng.gen_range(0..=w - pw);
        for ch in 0..c {
            for r in r0..r0 + ph {
                for col in c0..c0 + pw {
                    out.set(&[ch, r, col], 0.0);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_cfg() -> SynthConfig {
        SynthConfig {
            classes: 4,
            per_identity: 10,
            channels: 2,
            h: 8,
            w: 4,
            noise: 0.05,
            occlusion_prob: 0.2,
            shift_max: 2,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = Dataset::generate(&base_cfg(), 7).unwrap();
        let b = Dataset::generate(&base_cfg(), 7).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.samples().iter().zip(b.samples()) {
            assert_eq!(x.features.data(), y.features.data());
            assert_eq!(x.id, y.id);
            assert_eq!(x.camera, y.camera);
            assert_eq!(x.split, y.split);
        }
        let c = Dataset::generate(&base_cfg(), 8).unwrap();
        assert!(a.samples()[0].features.data() != c.samples()[0].features.data());
    }

    #[test]
    fn ten_per_identity_splits_six_one_three() {
        let d = Dataset::generate(&base_cfg(), 1).unwrap();
        assert_eq!(d.len(), 40);
        assert_eq!(d.train().len(), 4 * 6);
        assert_eq!(d.query().len(), 4);
        assert_eq!(d.gallery().len(), 4 * 3);
        // Splits partition samples per identity in order train→query→gallery.
        for id in 0..4 {
            let of_id: Vec<_> = d.samples().iter().filter(|s| s.id == id).collect();
            assert_eq!(of_id.len(), 10);
            let splits: Vec<_> = of_id.iter().map(|s| s.split).collect();
            assert_eq!(
                splits,
                [
                    Split::Train,
                    Split::Train,
                    Split::Train,
                    Split::Train,
                    Split::Train,
                    Split::Train,
                    Split::Query,
                    Split::Gallery,
                    Split::Gallery,
                    Split::Gallery,
                ]
            );
        }
    }

    #[test]
    fn minimum_sizes_still_fill_every_split() {
        let mut cfg = base_cfg();
        cfg.per_identity = 4;
        let d = Dataset::generate(&cfg, 2).unwrap();
        assert_eq!(d.train().len(), 4 * 2);
        assert_eq!(d.query().len(), 4);
        assert_eq!(d.gallery().len(), 4);
    }

    #[test]
    fn cameras_alternate_and_every_query_has_a_cross_camera_match() {
        for per_identity in [4usize, 5, 6, 7, 10, 12, 20] {
            let mut cfg = base_cfg();
            cfg.per_identity = per_identity;
            let d = Dataset::generate(&cfg, 3).unwrap();
            for s in d.samples() {
                assert!(s.camera == 0 || s.camera == 1);
            }
            for q in d.query() {
                let matched = d
                    .gallery()
                    .iter()
                    .any(|g| g.id == q.id && g.camera != q.camera);
                assert!(
                    matched,
                    "query of id {} (camera {}) lacks a cross-camera gallery match at n={per_identity}",
                    q.id, q.camera
                );
            }
        }
    }

    #[test]
    fn clean_samples_are_circular_shifts_of_the_template() {
        // With no noise and no occlusion, each sample's per-channel value
        // multiset equals the template's.
        let mut cfg = base_cfg();
        cfg.noise = 0.0;
        cfg.occlusion_prob = 0.0;
        let d = Dataset::generate(&cfg, 4).unwrap();
        let per_channel_sorted = |t: &Tensor, ch: usize| -> Vec<f64> {
            let hw = cfg.h * cfg.w;
            let mut v = t.data()[ch * hw..(ch + 1) * hw].to_vec();
            v.sort_by(f64::total_cmp);
            v
        };
        // Samples of one id must all share the template's multiset.
        let of_id0: Vec<_> = d.samples().iter().filter(|s| s.id == 0).collect();
        let reference = per_channel_sorted(&of_id0[0].features, 0);
        for s in &of_id0 {
            assert_eq!(per_channel_sorted(&s.features, 0), reference);
        }
    }

    #[test]
    fn forced_occlusion_zeroes_a_patch() {
        let mut cfg = base_cfg();
        cfg.occlusion_prob = 1.0;
        let d = Dataset::generate(&cfg, 5).unwrap();
        let patch = (cfg.h / 4).max(1) * (cfg.w / 4).max(1);
        for s in d.samples() {
            let zeros = s.features.data().iter().filter(|&&v| v == 0.0).count();
            assert!(
                zeros >= patch * cfg.channels,
                "expected an occlusion patch of at least {} zeros, found {zeros}",
                patch * cfg.channels
            );
        }
    }

    #[test]
    fn zero_noise_zero_shift_reproduces_the_template_exactly() {
        let mut cfg = base_cfg();
        cfg.noise = 0.0;
        cfg.occlusion_prob = 0.0;
        cfg.shift_max = 0;
        let d = Dataset::generate(&cfg, 6).unwrap();
        let of_id: Vec<_> = d.samples().iter().filter(|s| s.id == 2).collect();
        for s in &of_id[1..] {
            assert_eq!(s.features.data(), of_id[0].features.data());
        }
    }

    #[test]
    fn config_validation_catches_bad_values() {
        let mut cfg = base_cfg();
        cfg.classes = 1;
        assert!(Dataset::generate(&cfg, 0).is_err());
        let mut cfg = base_cfg();
        cfg.per_identity = 3;
        assert!(Dataset::generate(&cfg, 0).is_err());
        let mut cfg = base_cfg();
        cfg.occlusion_prob = 1.5;
        assert!(Dataset::generate(&cfg, 0).is_err());
        let mut cfg = base_cfg();
        cfg.noise = -0.1;
        assert!(Dataset::generate(&cfg, 0).is_err());
    }
}
