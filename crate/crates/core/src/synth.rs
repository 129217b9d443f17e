//! Synthetic checkpoint runs with a controllable class coherence.
//!
//! At coherence `c` each class is an isotropic Gaussian with mean `c * mu_class`
//! and standard deviation `1 - 0.9 c`. Class centres sit on the signed axes of
//! a random orthonormal frame at distance `separation` from the origin, so
//! `c = 0` is one shared blob and `c = 1` gives tight, well-separated clusters.
//! The coherence doubles as the pseudo-accuracy of the checkpoint.
//!
//! The default run fills every signed axis of a 4-dimensional frame (8 classes)
//! at unit separation.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::controls::random_orthogonal;
use crate::error::{Error, Result};
use crate::ingest::{npy, EmbeddingSet, ManifestEntry, RunManifest};
use crate::matrix::Matrix;

const FRAME_SALT: u64 = 0x5EED_F4A3_E000_0001;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_checkpoints: usize,
    pub n_classes: usize,
    pub n_per_class: usize,
    pub dim: usize,
    /// One value in `[0, 1]` per checkpoint.
    pub coherence_schedule: Vec<f64>,
    /// Distance of each class centre from the origin.
    pub separation: f64,
    pub seed: u64,
}

impl SynthConfig {
    /// Evenly spaced coherence from 0 to 1.
    pub fn linear(n_checkpoints: usize, seed: u64) -> Self {
        let denom = n_checkpoints.saturating_sub(1).max(1) as f64;
        SynthConfig {
            n_checkpoints,
            n_classes: 8,
            n_per_class: 200,
            dim: 4,
            coherence_schedule: (0..n_checkpoints).map(|t| t as f64 / denom).collect(),
            separation: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_checkpoints < 3 {
            return Err(Error::range("n_checkpoints", self.n_checkpoints, ">= 3"));
        }
        if self.coherence_schedule.len() != self.n_checkpoints {
            return Err(Error::range(
                "coherence_schedule",
                format!("{} values", self.coherence_schedule.len()),
                format!("{} values", self.n_checkpoints),
            ));
        }
        if let Some(c) = self.coherence_schedule.iter().find(|c| !(0.0..=1.0).contains(*c)) {
            return Err(Error::range("coherence", c, "[0, 1]"));
        }
        if self.dim == 0 {
            return Err(Error::range("dim", 0, ">= 1"));
        }
        if self.n_classes == 0 || self.n_classes > 2 * self.dim {
            return Err(Error::range("n_classes", self.n_classes, format!("1..={}", 2 * self.dim)));
        }
        if self.n_per_class == 0 {
            return Err(Error::range("n_per_class", 0, ">= 1"));
        }
        if !(self.separation.is_finite() && self.separation > 0.0) {
            return Err(Error::range("separation", self.separation, "> 0"));
        }
        Ok(())
    }

    /// Class centres: `±separation` times the columns of a seeded random
    /// orthonormal frame, so centres are pairwise `separation * sqrt(2)` apart
    /// (or `2 * separation` for antipodal pairs) and not axis-aligned.
    pub fn class_means(&self) -> Vec<Vec<f64>> {
        let frame = random_orthogonal(self.dim, self.seed ^ FRAME_SALT);
        (0..self.n_classes)
            .map(|k| {
                let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
                frame.column(k / 2).iter().map(|x| sign * self.separation * x).collect()
            })
            .collect()
    }

    fn checkpoint_seed(&self, t: usize) -> u64 {
        self.seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(t as u64 + 1)
    }
}

/// One generated checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthCheckpoint {
    pub set: EmbeddingSet,
    pub epoch: i64,
    pub coherence: f64,
}

/// Draws the embedding set of checkpoint `t`; rows are grouped by class.
pub fn generate_checkpoint(cfg: &SynthConfig, t: usize) -> Result<SynthCheckpoint> {
    cfg.validate()?;
    let c = *cfg
        .coherence_schedule
        .get(t)
        .ok_or_else(|| Error::range("t", t, format!("< {}", cfg.n_checkpoints)))?;
    let std = 1.0 - 0.9 * c;
    let noise = Normal::new(0.0, std).map_err(|e| Error::Degenerate(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.checkpoint_seed(t));
    let n = cfg.n_classes * cfg.n_per_class;
    let mut data = Vec::with_capacity(n * cfg.dim);
    let mut labels = Vec::with_capacity(n);
    for (class_id, mu) in cfg.class_means().into_iter().enumerate() {
        for _ in 0..cfg.n_per_class {
            data.extend(mu.iter().map(|m| c * m + noise.sample(&mut rng)));
            labels.push(class_id as u32);
        }
    }
    let id = checkpoint_id(t);
    let set = EmbeddingSet::new(Matrix::new(n, cfg.dim, data)?, labels)?.with_tags(id, "synthetic");
    Ok(SynthCheckpoint {
        set,
        epoch: t as i64 + 1,
        coherence: c,
    })
}

/// All checkpoints of a run, in schedule order.
pub fn generate_sets(cfg: &SynthConfig) -> Result<Vec<SynthCheckpoint>> {
    (0..cfg.n_checkpoints).map(|t| generate_checkpoint(cfg, t)).collect()
}

pub fn checkpoint_id(t: usize) -> String {
    format!("ckpt_{t:03}")
}

/// Writes `<id>_embeddings.npy`, `<id>_labels.npy` and `manifest.json` into
/// `out_dir` and returns the manifest (paths relative to `out_dir`).
pub fn generate_run(cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<RunManifest> {
    let out_dir = out_dir.as_ref();
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut manifest = RunManifest::default();
    for t in 0..cfg.n_checkpoints {
        let ck = generate_checkpoint(cfg, t)?;
        let id = ck.set.checkpoint_id.clone();
        let emb = PathBuf::from(format!("{id}_embeddings.npy"));
        let lab = PathBuf::from(format!("{id}_labels.npy"));
        npy::write_matrix(out_dir.join(&emb), &ck.set.embeddings)?;
        let labels: Vec<i64> = ck.set.labels.iter().map(|&l| i64::from(l)).collect();
        npy::write_labels(out_dir.join(&lab), &labels)?;
        manifest.checkpoints.push(ManifestEntry {
            checkpoint_id: id,
            embeddings_path: emb,
            labels_path: lab,
            epoch: Some(ck.epoch),
            ood_accuracy: Some(ck.coherence),
        });
    }
    manifest.save(out_dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::load_embeddings;

    fn cfg() -> SynthConfig {
        SynthConfig {
            n_per_class: 400,
            ..SynthConfig::linear(3, 11)
        }
    }

    fn class_stats(set: &EmbeddingSet, class_id: u32) -> (Vec<f64>, f64) {
        let rows = &set.class_rows()[&class_id];
        let d = set.dim();
        let mut mean = vec![0.0; d];
        for &r in rows {
            for (m, x) in mean.iter_mut().zip(set.embeddings.row(r)) {
                *m += x / rows.len() as f64;
            }
        }
        let var = rows
            .iter()
            .map(|&r| crate::matrix::sq_dist(set.embeddings.row(r), &mean))
            .sum::<f64>()
            / (rows.len() * d) as f64;
        (mean, var.sqrt())
    }

    #[test]
    fn coherent_classes_are_separated() {
        let ck = generate_checkpoint(&cfg(), 2).unwrap();
        assert_eq!(ck.coherence, 1.0);
        let stats: Vec<_> = (0..4).map(|c| class_stats(&ck.set, c)).collect();
        for a in 0..4 {
            assert!((stats[a].1 - 0.1).abs() < 0.01);
            for b in a + 1..4 {
                let gap = crate::matrix::dist(&stats[a].0, &stats[b].0);
                assert!(gap >= 5.0 * stats[a].1.max(stats[b].1), "gap {gap}");
            }
        }
    }

    #[test]
    fn tangled_classes_share_a_distribution() {
        let ck = generate_checkpoint(&cfg(), 0).unwrap();
        let (m0, s0) = class_stats(&ck.set, 0);
        let (m1, s1) = class_stats(&ck.set, 1);
        let se = (s0 * s0 / 400.0 + s1 * s1 / 400.0).sqrt();
        for (a, b) in m0.iter().zip(&m1) {
            assert!((a - b).abs() <= 3.0 * se);
        }
        assert!((s0 - 1.0).abs() < 0.05 && (s1 - 1.0).abs() < 0.05);
    }

    #[test]
    fn dispersion_follows_schedule() {
        let c = SynthConfig::linear(5, 2);
        let sets = generate_sets(&c).unwrap();
        let spreads: Vec<f64> = sets.iter().map(|s| class_stats(&s.set, 0).1).collect();
        for (s, ck) in spreads.iter().zip(&sets) {
            let want = 1.0 - 0.9 * ck.coherence;
            // sample std of 200x8 draws: relative error well under 3 / sqrt(2 * 1600)
            assert!((s - want).abs() <= 3.0 * want / (2.0 * 1600.0f64).sqrt() + 1e-3);
        }
        assert!(spreads.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn files_round_trip_and_are_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        let c = SynthConfig::linear(3, 5);
        let m = generate_run(&c, &a).unwrap();
        generate_run(&c, &b).unwrap();
        for e in &m.checkpoints {
            for p in [&e.embeddings_path, &e.labels_path] {
                assert_eq!(fs::read(a.join(p)).unwrap(), fs::read(b.join(p)).unwrap());
            }
        }
        let loaded = RunManifest::load(a.join("manifest.json")).unwrap();
        assert_eq!(loaded.checkpoints.len(), 3);
        let e = &loaded.checkpoints[1];
        let set = load_embeddings(&e.embeddings_path, &e.labels_path).unwrap();
        let orig = generate_checkpoint(&c, 1).unwrap();
        assert_eq!(set.embeddings, orig.set.embeddings);
        assert_eq!(set.labels, orig.set.labels);
        assert_eq!(e.ood_accuracy, Some(0.5));
    }

    #[test]
    fn invalid_configs() {
        let mut c = SynthConfig::linear(3, 0);
        c.coherence_schedule[1] = 1.5;
        assert!(c.validate().is_err());
        assert!(SynthConfig::linear(2, 0).validate().is_err());
        let mut c = SynthConfig::linear(3, 0);
        c.n_classes = 17;
        assert!(c.validate().is_err());
    }
}
