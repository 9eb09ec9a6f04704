//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, Context, Result};
use makeup_shield_api::mock::{MockMode, MockServer};
use makeup_shield_api::{BatchItem, ClientConfig, CompareClient, ENDPOINT_VAR, KEY_VAR};
use makeup_shield_core::denoisers::GaussianDenoiser;
use makeup_shield_core::encoders::{EncoderRegistry, FaceEmbedder};
use makeup_shield_core::eval::{
    attack_success_rate, calibrate_threshold, fid, impostor_pairs, psnr, ssim, EvalReport,
    VerificationThreshold,
};
use makeup_shield_core::io::{load_image, save_image};
use makeup_shield_core::pipeline::{
    protect, run_adversarial_transfer, run_makeup_removal, ReferenceStyle, RemovalModels,
    TransferModels, TunedModel,
};
use makeup_shield_core::regions::{load_label_map, mask_path_for, save_label_map, RegionMasks};
use makeup_shield_core::rng::derive_seed;
use makeup_shield_core::schedule::NoiseSchedule;
use makeup_shield_core::toydata::{toy_removal_config, toy_transfer_config, ToyScenario};
use makeup_shield_core::{par, ImageBuffer, ImageShape};
use serde::Serialize;

use crate::config::{DataConfig, ExperimentConfig};
use crate::manifest::{write_json, write_jsonl, ImageRecord, RunManifest};

/// Marks failures caused by the configuration or its inputs (exit code 2).
#[derive(Debug)]
pub struct InvalidConfig(pub String);

impl fmt::Display for InvalidConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid configuration: {}", self.0)
    }
}

impl std::error::Error for InvalidConfig {}

pub fn invalid(e: impl Into<anyhow::Error>) -> anyhow::Error {
    anyhow!(InvalidConfig(format!("{:#}", e.into())))
}

/// Images of a dataset root in file-name order.
struct Dataset {
    paths: Vec<PathBuf>,
    images: Vec<ImageBuffer>,
    identities: Vec<String>,
}

fn read_identities(root: &Path) -> Result<BTreeMap<String, String>> {
    let path = root.join("identities.tsv");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| invalid(anyhow!("identities file {}: {e}", path.display())))?;
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (stem, label) = line.split_once('\t').ok_or_else(|| {
            invalid(anyhow!(
                "{}:{}: expected `stem<TAB>identity`",
                path.display(),
                n + 1
            ))
        })?;
        out.insert(stem.to_string(), label.to_string());
    }
    Ok(out)
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn load_dataset(root: &Path, shape: ImageShape, with_identities: bool) -> Result<Dataset> {
    let paths =
        ExperimentConfig::list_pngs(&ExperimentConfig::images_dir(root)).map_err(invalid)?;
    if paths.is_empty() {
        return Err(invalid(anyhow!("no images under {}", root.display())));
    }
    let images = load_all(&paths, shape)?;
    let identities = if with_identities {
        let map = read_identities(root)?;
        paths
            .iter()
            .map(|p| {
                map.get(&stem(p))
                    .cloned()
                    .ok_or_else(|| invalid(anyhow!("no identity listed for {}", p.display())))
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    Ok(Dataset {
        paths,
        images,
        identities,
    })
}

fn load_checked(path: &Path, shape: ImageShape) -> Result<ImageBuffer> {
    let img = load_image(path)?;
    if img.shape() != shape {
        return Err(invalid(anyhow!(
            "{} is {}, expected {}",
            path.display(),
            img.shape(),
            shape
        )));
    }
    Ok(img)
}

fn load_all(paths: &[PathBuf], shape: ImageShape) -> Result<Vec<ImageBuffer>> {
    par::try_map(paths, |p| load_checked(p, shape))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Everything a subcommand needs besides its own arguments.
pub struct Session {
    pub cfg: ExperimentConfig,
    pub hash: String,
    sched: Arc<NoiseSchedule>,
    shape: ImageShape,
    registry: EncoderRegistry,
}

impl Session {
    /// Validates `cfg`, creates the output directory and persists the
    /// effective config there.
    pub fn open(cfg: ExperimentConfig, needs_masks: bool) -> Result<Self> {
        cfg.validate_inputs(needs_masks).map_err(invalid)?;
        let sched = Arc::new(cfg.schedule.build().map_err(invalid)?);
        cfg.removal
            .validate(&sched)
            .map_err(|e| invalid(anyhow!("[removal] {e}")))?;
        cfg.transfer
            .validate(&sched)
            .map_err(|e| invalid(anyhow!("[transfer] {e}")))?;
        let shape = load_image(&cfg.data.target)?.shape();
        let registry = EncoderRegistry::new(derive_seed(cfg.seed, "models"), shape)
            .with_face_family(cfg.models.face_family);
        // Resolve every model name up front so typos fail as config errors.
        registry
            .joint(&cfg.models.image_encoder, &cfg.models.text_encoder)
            .map_err(invalid)?;
        registry
            .image_encoder(&cfg.eval.fid_features)
            .map_err(invalid)?;
        registry
            .perceptual(&cfg.models.perceptual)
            .map_err(invalid)?;
        registry
            .face_embedder(&cfg.models.identity)
            .map_err(invalid)?;
        registry
            .face_embedders(&cfg.models.ensemble)
            .map_err(invalid)?;
        registry
            .face_embedders(&cfg.eval.embedders)
            .map_err(invalid)?;
        std::fs::create_dir_all(&cfg.out)
            .with_context(|| format!("creating {}", cfg.out.display()))?;
        cfg.persist()?;
        Ok(Self {
            hash: cfg.hash(),
            cfg,
            sched,
            shape,
            registry,
        })
    }

    fn manifest(&self, command: &str) -> RunManifest {
        let mut m = RunManifest::new(command, self.hash.clone(), self.cfg.seed);
        m.artifacts
            .insert("config".into(), crate::manifest::CONFIG_FILE.into());
        m
    }

    fn out(&self, rel: &str) -> Result<PathBuf> {
        let p = self.cfg.out.join(rel);
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        Ok(p)
    }

    fn denoiser(&self) -> Result<GaussianDenoiser> {
        let dir = &self.cfg.data.denoiser_train;
        let paths = ExperimentConfig::list_pngs(dir).map_err(invalid)?;
        if paths.is_empty() {
            return Err(invalid(anyhow!("no training images in {}", dir.display())));
        }
        let train = load_all(&paths, self.shape)?;
        Ok(GaussianDenoiser::fit(
            &train,
            self.sched.clone(),
            self.cfg.denoiser.var_floor,
        )?)
    }

    fn sources(&self, with_identities: bool) -> Result<Dataset> {
        load_dataset(&self.cfg.data.sources, self.shape, with_identities)
    }

    fn source_masks(&self, ds: &Dataset) -> Result<Vec<RegionMasks>> {
        let dir = ExperimentConfig::masks_dir(&self.cfg.data.sources);
        ds.paths
            .iter()
            .map(|p| Ok(load_label_map(&mask_path_for(p, &dir), Some(self.shape))?))
            .collect()
    }

    fn target_scores(
        &self,
        embedders: &[Arc<dyn FaceEmbedder>],
        target: &ImageBuffer,
        images: &[ImageBuffer],
    ) -> Result<Vec<BTreeMap<String, f64>>> {
        let targets = embedders
            .iter()
            .map(|e| e.face_embed(target))
            .collect::<makeup_shield_core::Result<Vec<_>>>()?;
        par::try_map(images, |img| {
            embedders
                .iter()
                .zip(&targets)
                .map(|(e, t)| {
                    Ok((
                        e.name().to_string(),
                        e.face_embed(img)?.cosine(t).unwrap_or(0.0),
                    ))
                })
                .collect::<Result<BTreeMap<_, _>>>()
        })
    }

    /// Stage 1 on the configured reference; artifacts go under `removal/`.
    fn run_removal(
        &self,
        denoiser: &GaussianDenoiser,
        manifest: &mut RunManifest,
    ) -> Result<ImageBuffer> {
        let cfg = &self.cfg;
        let reference = load_checked(&cfg.data.reference, self.shape)?;
        let encoders = self
            .registry
            .joint(&cfg.models.image_encoder, &cfg.models.text_encoder)?;
        let identity = self.registry.face_embedder(&cfg.models.identity)?;
        let perceptual = self.registry.perceptual(&cfg.models.perceptual)?;
        let models = RemovalModels {
            encoders: &encoders,
            identity: identity.as_ref(),
            perceptual: perceptual.as_ref(),
        };
        let art = run_makeup_removal(
            std::slice::from_ref(&reference),
            denoiser,
            &self.sched,
            models,
            &cfg.removal,
        )?;
        let clean = art.clean[0].clone();
        write_json(&self.out("removal/tuned.json")?, &art.tuned)?;
        write_jsonl(&self.out("removal/log.jsonl")?, &art.log)?;
        save_image(&clean, &self.out("removal/reference_clean.png")?)?;
        for (k, v) in [
            ("removal_tuned", "removal/tuned.json"),
            ("removal_log", "removal/log.jsonl"),
            ("reference_clean", "removal/reference_clean.png"),
        ] {
            manifest.artifacts.insert(k.into(), v.into());
        }
        let id_cos = identity
            .face_embed(&reference)?
            .cosine(&identity.face_embed(&clean)?)
            .unwrap_or(0.0);
        manifest.records.push(ImageRecord {
            input: cfg.data.reference.clone(),
            output: Some("removal/reference_clean.png".into()),
            scores: BTreeMap::from([
                ("direction_norm".into(), art.directions[0].norm()),
                ("identity_cosine".into(), id_cos),
                (
                    "final_loss".into(),
                    art.log.last().map_or(f64::NAN, |r| r.total),
                ),
            ]),
        });
        Ok(clean)
    }
}

pub fn remove_makeup(s: &Session) -> Result<PathBuf> {
    let mut m = s.manifest("remove-makeup");
    let den = s.denoiser()?;
    s.run_removal(&den, &mut m)?;
    m.save(&s.cfg.out)
}

#[derive(Serialize)]
struct TransferSummary {
    tag: String,
    mean_direction_cosine: f64,
    mean_target_cosine: BTreeMap<String, f64>,
    final_loss: f64,
}

fn mean_per_key(rows: &[BTreeMap<String, f64>]) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in rows {
        for (k, v) in r {
            acc.entry(k.clone()).or_default().push(*v);
        }
    }
    acc.into_iter().map(|(k, v)| (k, mean(&v))).collect()
}

fn protected_path(input: &Path) -> String {
    format!("protected/{}.png", stem(input))
}

pub fn transfer(s: &Session) -> Result<PathBuf> {
    let cfg = &s.cfg;
    let mut m = s.manifest("transfer");
    let den = s.denoiser()?;
    let sources = s.sources(false)?;
    let masks = s.source_masks(&sources)?;
    let reference = load_checked(&cfg.data.reference, s.shape)?;
    let ref_masks = load_label_map(&cfg.reference_masks_path(), Some(s.shape))?;
    let clean = match &cfg.data.reference_clean {
        Some(p) => load_checked(p, s.shape)?,
        None => {
            let clean = s.run_removal(&den, &mut m)?;
            // The removal record describes the reference, not a protected source.
            m.records.clear();
            clean
        }
    };
    let encoder = s.registry.image_encoder(&cfg.models.image_encoder)?;
    let style = ReferenceStyle::new(reference, clean, ref_masks, encoder.as_ref())?;
    let target = load_checked(&cfg.data.target, s.shape)?;
    let ensemble = s.registry.face_embedders(&cfg.models.ensemble)?;
    let perceptual = s.registry.perceptual(&cfg.models.perceptual)?;
    let models = TransferModels {
        image_encoder: encoder.as_ref(),
        ensemble: &ensemble,
        perceptual: perceptual.as_ref(),
    };
    let art = run_adversarial_transfer(
        &sources.images,
        &masks,
        &style,
        &target,
        &den,
        &s.sched,
        models,
        &cfg.transfer,
    )?;
    write_json(&s.out("transfer/tuned.json")?, &art.tuned)?;
    write_jsonl(&s.out("transfer/log.jsonl")?, &art.log)?;
    m.artifacts
        .insert("tuned".into(), "transfer/tuned.json".into());
    m.artifacts
        .insert("log".into(), "transfer/log.jsonl".into());
    for (i, input) in sources.paths.iter().enumerate() {
        let rel = protected_path(input);
        save_image(&art.protected[i], &s.out(&rel)?)?;
        let mut scores = art.target_cosines[i].clone();
        scores.insert("direction_cosine".into(), art.direction_cosines[i]);
        m.records.push(ImageRecord {
            input: input.clone(),
            output: Some(rel.into()),
            scores,
        });
    }
    let summary = TransferSummary {
        tag: art.tag.clone(),
        mean_direction_cosine: mean(&art.direction_cosines),
        mean_target_cosine: mean_per_key(&art.target_cosines),
        final_loss: art.log.last().map_or(f64::NAN, |r| r.total),
    };
    write_json(&s.out("transfer/summary.json")?, &summary)?;
    m.report = Some("transfer/summary.json".into());
    log::info!(
        "transfer [{}] finished: {} images protected",
        art.tag,
        art.protected.len()
    );
    m.save(&cfg.out)
}

pub fn protect_sources(s: &Session, artifacts: &Path) -> Result<PathBuf> {
    let cfg = &s.cfg;
    let mut m = s.manifest("protect");
    let text = std::fs::read_to_string(artifacts)
        .with_context(|| format!("reading {}", artifacts.display()))?;
    let tuned: TunedModel = serde_json::from_str(&text)
        .map_err(|e| invalid(anyhow!("artifacts {}: {e}", artifacts.display())))?;
    let den = s.denoiser()?;
    tuned
        .ensure_compatible(&den, &s.sched, &cfg.transfer)
        .map_err(invalid)?;
    let sources = s.sources(false)?;
    let out = par::try_map(&sources.images, |x| {
        protect(x, &den, &s.sched, &tuned, &cfg.transfer)
    })?;
    let images: Vec<ImageBuffer> = out.iter().map(|p| p.image.clone()).collect();
    let target = load_checked(&cfg.data.target, s.shape)?;
    let ensemble = s.registry.face_embedders(&cfg.models.ensemble)?;
    let scores = s.target_scores(&ensemble, &target, &images)?;
    for (i, input) in sources.paths.iter().enumerate() {
        let rel = protected_path(input);
        save_image(&images[i], &s.out(&rel)?)?;
        let mut sc = scores[i].clone();
        sc.insert("clamped".into(), out[i].clamped as f64);
        m.records.push(ImageRecord {
            input: input.clone(),
            output: Some(rel.into()),
            scores: sc,
        });
    }
    m.save(&cfg.out)
}

/// Impostor scores of `emb` over the configured gallery.
fn impostor_scores(s: &Session, emb: &dyn FaceEmbedder, gallery: &Dataset) -> Result<Vec<f64>> {
    let pairs = impostor_pairs(
        &gallery.identities,
        s.cfg.eval.max_impostor_pairs,
        s.cfg.seed,
    );
    if pairs.is_empty() {
        return Err(invalid(anyhow!(
            "impostor dataset {} has fewer than two identities",
            s.cfg.data.impostors.display()
        )));
    }
    let embs = par::try_map(&gallery.images, |img| emb.face_embed(img))?;
    Ok(pairs
        .iter()
        .map(|&(i, j)| embs[i].cosine(&embs[j]).unwrap_or(0.0))
        .collect())
}

fn thresholds(s: &Session) -> Result<BTreeMap<String, VerificationThreshold>> {
    let gallery = load_dataset(&s.cfg.data.impostors, s.shape, true)?;
    s.cfg
        .eval
        .embedders
        .iter()
        .map(|name| {
            let emb = s.registry.face_embedder(name)?;
            let scores = impostor_scores(s, emb.as_ref(), &gallery)?;
            Ok((name.clone(), calibrate_threshold(&scores, s.cfg.eval.far)?))
        })
        .collect()
}

pub fn calibrate(s: &Session) -> Result<PathBuf> {
    let mut m = s.manifest("calibrate-threshold");
    let th = thresholds(s)?;
    write_json(&s.out("thresholds.json")?, &th)?;
    m.report = Some("thresholds.json".into());
    m.save(&s.cfg.out)
}

/// Inputs and outputs listed by a previous run.
struct PriorRun {
    manifest: RunManifest,
    outputs: Vec<PathBuf>,
    clean: Vec<ImageBuffer>,
    protected: Vec<ImageBuffer>,
}

fn manifest_images(s: &Session, path: &Path) -> Result<PriorRun> {
    let path = &path
        .canonicalize()
        .map_err(|e| invalid(anyhow!("manifest {}: {e}", path.display())))?;
    let prev = RunManifest::load(path).map_err(invalid)?;
    if prev.config_hash != s.hash {
        log::warn!(
            "manifest {} was produced under config {}; current config is {}",
            path.display(),
            prev.config_hash,
            s.hash
        );
    }
    let dir = path.parent().unwrap_or(Path::new("."));
    let outputs = prev.outputs(dir);
    if outputs.is_empty() {
        return Err(invalid(anyhow!(
            "manifest {} lists no output images",
            path.display()
        )));
    }
    let inputs: Vec<PathBuf> = prev
        .records
        .iter()
        .filter(|r| r.output.is_some())
        .map(|r| r.input.clone())
        .collect();
    let protected = load_all(&outputs, s.shape)?;
    let clean = load_all(&inputs, s.shape)?;
    Ok(PriorRun {
        manifest: prev,
        outputs,
        clean,
        protected,
    })
}

pub fn evaluate(s: &Session, manifest: &Path) -> Result<PathBuf> {
    let cfg = &s.cfg;
    let mut m = s.manifest("evaluate");
    let PriorRun {
        manifest: prev,
        outputs,
        clean,
        protected,
    } = manifest_images(s, manifest)?;
    let target = load_checked(&cfg.data.target, s.shape)?;
    let th = thresholds(s)?;
    let pairs: Vec<(ImageBuffer, ImageBuffer)> = clean
        .iter()
        .cloned()
        .zip(protected.iter().cloned())
        .collect();
    let quality = par::try_map(&pairs, |(a, b)| {
        Ok::<_, makeup_shield_core::Error>((psnr(a, b)?, ssim(a, b)?))
    })?;
    let fid_value = if clean.len() >= 2 {
        let enc = s.registry.image_encoder(&cfg.eval.fid_features)?;
        let fa = par::try_map(&clean, |i| enc.embed_image(i))?;
        let fb = par::try_map(&protected, |i| enc.embed_image(i))?;
        Some(fid(&fa, &fb)?)
    } else {
        None
    };
    let psnr_mean = mean(&quality.iter().map(|q| q.0).collect::<Vec<_>>());
    let ssim_mean = mean(&quality.iter().map(|q| q.1).collect::<Vec<_>>());
    let mut reports = Vec::new();
    let mut per_image: Vec<BTreeMap<String, f64>> = quality
        .iter()
        .map(|(p, q)| BTreeMap::from([("psnr".into(), *p), ("ssim".into(), *q)]))
        .collect();
    for (name, t) in &th {
        let emb = s.registry.face_embedder(name)?;
        let asr = attack_success_rate(&protected, &target, emb.as_ref(), t)?;
        let asr_clean = attack_success_rate(&clean, &target, emb.as_ref(), t)?;
        for (row, score) in per_image.iter_mut().zip(&asr.scores) {
            row.insert(name.clone(), *score);
        }
        reports.push(EvalReport {
            model_name: name.clone(),
            tau: t.tau,
            far: t.far,
            asr: asr.asr,
            asr_clean: asr_clean.asr,
            psnr_mean,
            ssim_mean,
            fid: fid_value,
            n_images: protected.len(),
            config_hash: prev.config_hash.clone(),
        });
    }
    write_json(&s.out("report.json")?, &reports)?;
    write_json(&s.out("thresholds.json")?, &th)?;
    m.report = Some("report.json".into());
    m.artifacts
        .insert("thresholds".into(), "thresholds.json".into());
    for (path, scores) in outputs.into_iter().zip(per_image) {
        m.records.push(ImageRecord {
            input: path,
            output: None,
            scores,
        });
    }
    m.save(&cfg.out)
}

#[derive(Serialize)]
struct Timing {
    input: PathBuf,
    latency_ms: Option<f64>,
    attempts: Option<u32>,
    error: Option<String>,
}

/// Client settings: config values, then environment overrides.
fn client_config(cfg: &ClientConfig) -> ClientConfig {
    let mut c = cfg.clone();
    if let Ok(e) = std::env::var(ENDPOINT_VAR) {
        c.endpoint = e;
    }
    if let Ok(k) = std::env::var(KEY_VAR) {
        c.api_key = Some(k);
    }
    c
}

pub fn compare_api(s: &Session, manifest: &Path, mock_embedder: Option<&str>) -> Result<PathBuf> {
    let cfg = &s.cfg;
    let mut m = s.manifest("compare-api");
    let PriorRun {
        outputs, protected, ..
    } = manifest_images(s, manifest)?;
    let target = load_checked(&cfg.data.target, s.shape)?;
    let mock_emb = mock_embedder
        .map(|name| s.registry.face_embedder(name).map_err(invalid))
        .transpose()?;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?;
    let report = rt.block_on(async {
        let (client_cfg, _mock) = match mock_emb {
            Some(emb) => {
                let mock = MockServer::start(MockMode::Embedder(emb), None).await?;
                let c = ClientConfig {
                    endpoint: mock.endpoint(),
                    api_key: None,
                    ..cfg.api.clone()
                };
                (c, Some(mock))
            }
            None => (client_config(&cfg.api), None),
        };
        let client = CompareClient::new(client_cfg).map_err(invalid)?;
        anyhow::Ok(client.batch_compare(&protected, &target).await?)
    })?;
    let mut timings = Vec::new();
    for (path, item) in outputs.iter().zip(&report.items) {
        let mut scores = BTreeMap::new();
        match item {
            BatchItem::Ok(r) => {
                scores.insert("confidence".into(), r.confidence);
                timings.push(Timing {
                    input: path.clone(),
                    latency_ms: Some(r.latency_ms),
                    attempts: Some(r.attempts),
                    error: None,
                });
            }
            BatchItem::Failed { error } => {
                log::warn!("compare failed for {}: {error}", path.display());
                timings.push(Timing {
                    input: path.clone(),
                    latency_ms: None,
                    attempts: None,
                    error: Some(error.clone()),
                });
            }
        }
        m.records.push(ImageRecord {
            input: path.clone(),
            output: None,
            scores,
        });
    }
    write_json(&s.out("api_summary.json")?, &report.summary)?;
    // Latencies vary between runs, so they stay out of the manifest.
    write_json(&s.out("api_timings.json")?, &timings)?;
    m.report = Some("api_summary.json".into());
    m.save(&cfg.out)
}

pub fn serve_mock(
    s: &Session,
    addr: std::net::SocketAddr,
    fixed: Option<f64>,
    embedder: Option<&str>,
) -> Result<()> {
    let mode = match fixed {
        Some(v) => MockMode::Fixed(v),
        None => {
            let name = embedder
                .map(str::to_string)
                .or_else(|| s.cfg.eval.embedders.first().cloned())
                .ok_or_else(|| invalid(anyhow!("no embedder given and eval.embedders is empty")))?;
            MockMode::Embedder(s.registry.face_embedder(&name).map_err(invalid)?)
        }
    };
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?;
    rt.block_on(async {
        let mock = MockServer::bind(addr, mode, client_config(&s.cfg.api).api_key).await?;
        log::info!("mock face-compare service listening on {}", mock.endpoint());
        println!("{}", mock.endpoint());
        tokio::select! {
            _ = mock.wait() => {}
            _ = tokio::signal::ctrl_c() => {}
        }
        anyhow::Ok(())
    })
}

/// Writes the toy scenario as a ready-to-run dataset with its config.
pub fn generate_toy_data(out: &Path, seed: u64) -> Result<PathBuf> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let sc = ToyScenario::new(seed);
    let mut written: Vec<PathBuf> = Vec::new();
    let mut save = |img: &ImageBuffer, rel: String| -> Result<()> {
        let p = out.join(&rel);
        std::fs::create_dir_all(p.parent().expect("relative path has a parent"))?;
        save_image(img, &p)?;
        written.push(rel.into());
        Ok(())
    };
    let mut src_ids = String::new();
    let mut src_masks = Vec::new();
    for (k, f) in sc.sources.iter().enumerate() {
        save(&f.image, format!("sources/images/src-{k:02}.png"))?;
        src_masks.push((
            format!("sources/masks/src-{k:02}.mask.png"),
            f.masks.clone(),
        ));
        src_ids.push_str(&format!("src-{k:02}\t{}\n", f.identity));
    }
    let mut gallery_ids = String::new();
    for (i, f) in sc.faces.iter().enumerate() {
        save(&f.image, format!("gallery/images/face-{i:02}.png"))?;
        gallery_ids.push_str(&format!("face-{i:02}\t{}\n", f.identity));
    }
    for (i, img) in sc.denoiser_training.iter().enumerate() {
        save(img, format!("train/images/train-{i:02}.png"))?;
    }
    save(&sc.reference.image, "reference.png".into())?;
    save(&sc.target.image, "target.png".into())?;
    src_masks.push(("reference.mask.png".into(), sc.reference.masks.clone()));
    for (rel, masks) in &src_masks {
        let p = out.join(rel);
        std::fs::create_dir_all(p.parent().expect("relative path has a parent"))?;
        save_label_map(masks, &p)?;
        written.push(rel.into());
    }
    for (rel, text) in [
        ("sources/identities.tsv", &src_ids),
        ("gallery/identities.tsv", &gallery_ids),
    ] {
        std::fs::write(out.join(rel), text)?;
        written.push(rel.into());
    }

    let cfg = ExperimentConfig {
        seed,
        out: "run".into(),
        data: DataConfig {
            sources: "sources".into(),
            reference: "reference.png".into(),
            reference_masks: Some("reference.mask.png".into()),
            reference_clean: None,
            target: "target.png".into(),
            impostors: "gallery".into(),
            denoiser_train: "train/images".into(),
        },
        models: Default::default(),
        denoiser: Default::default(),
        schedule: Default::default(),
        removal: toy_removal_config(),
        transfer: toy_transfer_config(),
        eval: Default::default(),
        api: Default::default(),
    };
    std::fs::write(out.join(crate::manifest::CONFIG_FILE), cfg.to_toml()?)?;
    let mut m = RunManifest::new("generate-toy-data", cfg.hash(), seed);
    m.artifacts
        .insert("config".into(), crate::manifest::CONFIG_FILE.into());
    for rel in written {
        m.records.push(ImageRecord {
            input: PathBuf::new(),
            output: Some(rel),
            scores: BTreeMap::new(),
        });
    }
    m.save(out)
}
