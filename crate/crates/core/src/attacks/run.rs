use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha1::{Digest, Sha1};

use super::objective::TargetRecord;
use super::AttackError;
use crate::model::{
    encode_png, load_artifact, save_artifact, ArtifactKind, ArtifactSidecar, ImagePlane, LatentTextureMap, OptimConfig,
    PatchSpec,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub total: f64,
    pub score: f64,
    pub tv: f64,
    pub nps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Artifact {
    Patch(PatchSpec),
    Texture(LatentTextureMap),
}

impl Artifact {
    pub fn pixels(&self) -> &ImagePlane {
        match self {
            Self::Patch(p) => &p.pixels,
            Self::Texture(t) => &t.pixels,
        }
    }

    pub fn kind(&self) -> ArtifactKind {
        match self {
            Self::Patch(_) => ArtifactKind::Patch,
            Self::Texture(_) => ArtifactKind::Texture,
        }
    }

    pub fn sidecar(&self, seed: u64) -> ArtifactSidecar {
        match self {
            Self::Patch(p) => ArtifactSidecar {
                kind: ArtifactKind::Patch,
                gamma: 0.0,
                base_w: p.pixels.width(),
                base_h: p.pixels.height(),
                c0: p.c0,
                kappa: p.kappa,
                seed,
            },
            Self::Texture(t) => ArtifactSidecar {
                kind: ArtifactKind::Texture,
                gamma: t.gamma,
                base_w: t.base_w,
                base_h: t.base_h,
                c0: PatchSpec::DEFAULT_C0,
                kappa: 1.0,
                seed,
            },
        }
    }

    pub fn from_parts(pixels: ImagePlane, sidecar: &ArtifactSidecar) -> Result<Self, AttackError> {
        Ok(match sidecar.kind {
            ArtifactKind::Patch => Self::Patch(PatchSpec::new(pixels, sidecar.c0, sidecar.kappa)?),
            ArtifactKind::Texture => {
                Self::Texture(LatentTextureMap::new(pixels, sidecar.base_h, sidecar.base_w, sidecar.gamma)?)
            }
        })
    }
}

/// Result of one optimization.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackRun {
    pub config: OptimConfig,
    pub targets: Vec<TargetRecord>,
    /// Mean objective terms per epoch.
    pub history: Vec<EpochLoss>,
    /// Lowest epoch loss seen so far, per epoch.
    pub best_loss: Vec<f64>,
    /// Quantized to 8 bits so it round-trips through PNG unchanged.
    pub artifact: Artifact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackManifest {
    pub kind: ArtifactKind,
    pub config: OptimConfig,
    pub seed: u64,
    pub targets: Vec<TargetRecord>,
    pub artifact: String,
    /// Git blob hash of the artifact PNG.
    pub artifact_sha1: String,
    pub loss_history: String,
    pub final_loss: Option<f64>,
    pub best_loss: Option<f64>,
}

/// `sha1("blob <len>\0" ‖ bytes)`, as `git hash-object` computes it.
pub fn git_blob_sha1(bytes: &[u8]) -> String {
    let mut h = Sha1::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    format!("{:x}", h.finalize())
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> AttackError {
    AttackError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

impl AttackRun {
    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    pub fn artifact_sha1(&self) -> String {
        git_blob_sha1(&encode_png(self.artifact.pixels()))
    }

    pub fn manifest(&self, stem: &str) -> AttackManifest {
        AttackManifest {
            kind: self.artifact.kind(),
            config: self.config.clone(),
            seed: self.seed(),
            targets: self.targets.clone(),
            artifact: format!("{stem}.png"),
            artifact_sha1: self.artifact_sha1(),
            loss_history: format!("{stem}_loss.csv"),
            final_loss: self.history.last().map(|e| e.total),
            best_loss: self.best_loss.last().copied(),
        }
    }

    /// Epoch, total, score, tv, nps.
    pub fn loss_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for e in &self.history {
            w.serialize(e).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv is utf-8")
    }

    /// Writes `<stem>.png`, its sidecar `<stem>.json`, `<stem>_loss.csv` and
    /// `<stem>_attack.json` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<AttackManifest, AttackError> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let manifest = self.manifest(stem);
        save_artifact(&dir.join(&manifest.artifact), self.artifact.pixels(), &self.artifact.sidecar(self.seed()))?;
        let csv_path = dir.join(&manifest.loss_history);
        fs::write(&csv_path, self.loss_csv()).map_err(|e| io_err(&csv_path, e))?;
        let m_path = dir.join(format!("{stem}_attack.json"));
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&m_path, json).map_err(|e| io_err(&m_path, e))?;
        Ok(manifest)
    }
}

/// Loads an artifact saved by [`AttackRun::save`] and checks its hash.
pub fn load_run_artifact(dir: &Path, stem: &str) -> Result<(Artifact, AttackManifest), AttackError> {
    let m_path = dir.join(format!("{stem}_attack.json"));
    let text = fs::read_to_string(&m_path).map_err(|e| io_err(&m_path, e))?;
    let manifest: AttackManifest = serde_json::from_str(&text).map_err(|e| io_err(&m_path, e))?;
    let png = dir.join(&manifest.artifact);
    let bytes = fs::read(&png).map_err(|e| io_err(&png, e))?;
    let got = git_blob_sha1(&bytes);
    if got != manifest.artifact_sha1 {
        return Err(io_err(&png, format!("hash {got} does not match manifest {}", manifest.artifact_sha1)));
    }
    let (pixels, sidecar) = load_artifact(&png)?;
    Ok((Artifact::from_parts(pixels, &sidecar)?, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_hash_matches_git() {
        // `printf 'hello\n' | git hash-object --stdin`
        assert_eq!(git_blob_sha1(b"hello\n"), "ce013625030ba8dba906f756967f9e9ca394464a");
        assert_eq!(git_blob_sha1(b""), "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
    }

    #[test]
    fn saved_run_reloads_identically() {
        let px = crate::model::quantize_rgb8(&ImagePlane::from_fn(9, 9, |y, x| [y as f64 / 9.0, x as f64 / 9.0, 0.3]));
        let run = AttackRun {
            config: OptimConfig::default(),
            targets: vec![],
            history: vec![EpochLoss {
                epoch: 0,
                total: 0.5,
                score: 0.4,
                tv: 0.1,
                nps: 0.0,
            }],
            best_loss: vec![0.5],
            artifact: Artifact::Texture(LatentTextureMap::new(px, 8, 8, 0.125).unwrap()),
        };
        let dir = tempfile::tempdir().unwrap();
        let m = run.save(dir.path(), "tex").unwrap();
        let (a, m2) = load_run_artifact(dir.path(), "tex").unwrap();
        assert_eq!(a, run.artifact);
        assert_eq!(m, m2);
        let csv = fs::read_to_string(dir.path().join("tex_loss.csv")).unwrap();
        assert_eq!(csv, "epoch,total,score,tv,nps\n0,0.5,0.4,0.1,0.0\n");
    }
}
