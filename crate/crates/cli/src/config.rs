//! Experiment configuration: TOML on disk, canonical JSON for hashing.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use makeup_shield_api::ClientConfig;
use makeup_shield_core::encoders::FaceFamilyConfig;
use makeup_shield_core::pipeline::FineTuneConfig;
use makeup_shield_core::regions::mask_path_for;
use makeup_shield_core::schedule::ScheduleConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset root with `images/`, `masks/` and `identities.tsv`.
    pub sources: PathBuf,
    pub reference: PathBuf,
    /// Defaults to `<reference stem>.mask.png` next to the reference.
    #[serde(default)]
    pub reference_masks: Option<PathBuf>,
    /// Makeup-free reference; when absent it is produced by makeup removal.
    #[serde(default)]
    pub reference_clean: Option<PathBuf>,
    pub target: PathBuf,
    /// Dataset root used for impostor pairs.
    pub impostors: PathBuf,
    /// Directory of PNGs the denoiser is fitted to.
    pub denoiser_train: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelsConfig {
    pub image_encoder: String,
    pub text_encoder: String,
    pub identity: String,
    pub ensemble: Vec<String>,
    pub perceptual: String,
    pub face_family: FaceFamilyConfig,
}

impl Default for ModelsConfig {
    fn default() -> Self {
        Self {
            image_encoder: "toy-linear-64".into(),
            text_encoder: "toy-text-64".into(),
            identity: "toy-face-0".into(),
            ensemble: vec![
                "toy-face-0".into(),
                "toy-face-1".into(),
                "toy-face-2".into(),
            ],
            perceptual: "toy-perceptual".into(),
            face_family: FaceFamilyConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    /// Only `gaussian` is built in.
    pub kind: String,
    pub var_floor: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            kind: "gaussian".into(),
            var_floor: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub far: f64,
    pub max_impostor_pairs: usize,
    /// Face embedders scored by `evaluate`.
    pub embedders: Vec<String>,
    /// Image encoder supplying FID features.
    pub fid_features: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            far: 0.01,
            max_impostor_pairs: 10_000,
            embedders: vec!["toy-face-3".into()],
            fid_features: "toy-linear-64".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Output directory; not part of the config hash.
    #[serde(default)]
    pub out: PathBuf,
    pub data: DataConfig,
    #[serde(default)]
    pub models: ModelsConfig,
    #[serde(default)]
    pub denoiser: DenoiserConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub removal: FineTuneConfig,
    #[serde(default)]
    pub transfer: FineTuneConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub api: ClientConfig,
}

/// Command-line overrides shared by every subcommand.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// Return step for both stages.
    #[arg(long)]
    pub t0: Option<usize>,
    /// Inversion steps for both stages.
    #[arg(long)]
    pub s_inv: Option<usize>,
    /// Sampling steps for both stages.
    #[arg(long)]
    pub s_sam: Option<usize>,
    /// Weight of the makeup-direction loss in transfer (0 disables it).
    #[arg(long)]
    pub lambda_dir: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl ExperimentConfig {
    /// Parses `path` and resolves relative paths against the config file's
    /// directory, then applies `ov` (a relative `--out` is taken from the
    /// working directory).
    pub fn load(path: &Path, ov: &Overrides) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: ExperimentConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let parent = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let base = parent
            .canonicalize()
            .with_context(|| format!("resolving {}", parent.display()))?;
        cfg.resolve_paths(&base);
        cfg.apply(ov);
        Ok(cfg)
    }

    fn apply(&mut self, ov: &Overrides) {
        for stage in [&mut self.removal, &mut self.transfer] {
            if let Some(v) = ov.t0 {
                stage.t0 = v;
            }
            if let Some(v) = ov.s_inv {
                stage.s_inv = v;
            }
            if let Some(v) = ov.s_sam {
                stage.s_sam = v;
            }
        }
        if let Some(v) = ov.lambda_dir {
            self.transfer.weights.direction = v;
        }
        if let Some(v) = ov.seed {
            self.seed = v;
        }
        self.removal.seed = self.seed;
        self.transfer.seed = self.seed;
        if let Some(o) = &ov.out {
            self.out = resolve(&std::env::current_dir().unwrap_or_default(), o);
        }
    }

    fn resolve_paths(&mut self, base: &Path) {
        let d = &mut self.data;
        for p in [
            &mut d.sources,
            &mut d.reference,
            &mut d.target,
            &mut d.impostors,
            &mut d.denoiser_train,
        ] {
            *p = resolve(base, p);
        }
        for p in [&mut d.reference_masks, &mut d.reference_clean]
            .into_iter()
            .flatten()
        {
            *p = resolve(base, p);
        }
        self.out = if self.out.as_os_str().is_empty() {
            base.join("out")
        } else {
            resolve(base, &self.out)
        };
    }

    pub fn reference_masks_path(&self) -> PathBuf {
        self.data.reference_masks.clone().unwrap_or_else(|| {
            let dir = self
                .data
                .reference
                .parent()
                .map(Path::to_path_buf)
                .unwrap_or_default();
            mask_path_for(&self.data.reference, &dir)
        })
    }

    pub fn images_dir(root: &Path) -> PathBuf {
        root.join("images")
    }

    pub fn masks_dir(root: &Path) -> PathBuf {
        root.join("masks")
    }

    /// Sorted PNG paths under `dir`.
    pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
        let mut out = Vec::new();
        for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
            let p = entry?.path();
            if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
                out.push(p);
            }
        }
        out.sort();
        Ok(out)
    }

    /// Checks every path the pipeline will read.
    pub fn validate_inputs(&self, needs_masks: bool) -> Result<()> {
        let must_exist = |p: &Path, what: &str| -> Result<()> {
            if !p.exists() {
                bail!("{what} not found: {}", p.display());
            }
            Ok(())
        };
        let d = &self.data;
        must_exist(&Self::images_dir(&d.sources), "source images directory")?;
        must_exist(&d.reference, "reference image")?;
        must_exist(&d.target, "target image")?;
        must_exist(&d.denoiser_train, "denoiser training directory")?;
        if let Some(p) = &d.reference_clean {
            must_exist(p, "clean reference image")?;
        }
        let sources = Self::list_pngs(&Self::images_dir(&d.sources))?;
        if sources.is_empty() {
            bail!(
                "no source images in {}",
                Self::images_dir(&d.sources).display()
            );
        }
        if needs_masks {
            must_exist(&self.reference_masks_path(), "reference mask file")?;
            for s in &sources {
                must_exist(&mask_path_for(s, &Self::masks_dir(&d.sources)), "mask file")?;
            }
        }
        if self.models.ensemble.is_empty() {
            bail!("models.ensemble must list at least one face embedder");
        }
        if !(self.eval.far > 0.0 && self.eval.far < 1.0) {
            bail!("eval.far must lie in (0, 1), got {}", self.eval.far);
        }
        if self.denoiser.kind != "gaussian" {
            bail!("unknown denoiser kind `{}`", self.denoiser.kind);
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form (sorted keys), excluding `out`.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("out");
        }
        let canonical = serde_json::to_string(&v).expect("json value serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Writes the effective config into its output directory with `out = "."`
    /// so reloading it points back at the same directory.
    pub fn persist(&self) -> Result<PathBuf> {
        let mut copy = self.clone();
        copy.out = PathBuf::from(".");
        let path = self.out.join(crate::manifest::CONFIG_FILE);
        std::fs::write(&path, copy.to_toml()?)
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
