//! Acceptance suite: one PASS/FAIL line per criterion.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::sync::Arc;
use std::time::{Duration, Instant};

use makeup_shield_api::mock::{embedder_confidence, MockMode, MockReply, MockServer};
use makeup_shield_api::{ApiError, ClientConfig, CompareClient, Summary};
use makeup_shield_core::ddim::{
    ddim_step, forward_sample, predict_x0, round_trip, sample_on_tape, Denoiser,
};
use makeup_shield_core::denoisers::{
    ConstantDenoiser, GaussianDenoiser, TanhAffineDenoiser, ZeroDenoiser,
};
use makeup_shield_core::encoders::{Embedding, EncoderRegistry, FaceEmbedder};
use makeup_shield_core::eval::{
    asr_from_scores, attack_success_rate, calibrate_threshold, fid, psnr, ssim, SATURATION_EPS,
};
use makeup_shield_core::io::{decode_png, encode_png};
use makeup_shield_core::losses::{graph, TRAINING_GUARD};
use makeup_shield_core::pipeline::{
    run_adversarial_transfer, run_makeup_removal, ReferenceStyle, RemovalModels, TransferArtifacts,
    TransferModels,
};
use makeup_shield_core::regions::{hm_image, Region, RegionMasks};
use makeup_shield_core::rng::{derive_seed, stream_rng};
use makeup_shield_core::schedule::{NoiseSchedule, TimestepSequence};
use makeup_shield_core::tape::{Tape, Var};
use makeup_shield_core::toydata::{toy_removal_config, toy_transfer_config, ToyScenario};
use makeup_shield_core::{ImageBuffer, ImageShape};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn random_image(rng: &mut impl Rng, shape: ImageShape, scale: f64) -> ImageBuffer {
    ImageBuffer::from_fn(shape, |_, _, _| rng.random_range(-scale..scale))
}

// ---------------------------------------------------------------- 1: DDIM

const ROUND_TRIP_BOUND: f64 = 2.1e-3;

fn criterion_ddim() -> Check {
    let start = Instant::now();
    let sched = NoiseSchedule::default();
    let shape = ImageShape::new(4, 5);
    let mut rng = stream_rng(1, "acceptance/ddim");
    let x = random_image(&mut rng, shape, 1.0);

    // ᾱ_t as an independent running product.
    let mut ab = vec![1.0f64];
    for i in 0..1000 {
        let beta = 1e-4 + (0.02 - 1e-4) * i as f64 / 999.0;
        ab.push(ab[i] * (1.0 - beta));
    }
    for t in [0, 1, 60, 500, 1000] {
        ensure((sched.alpha_bar(t) - ab[t]).abs() <= 1e-12, || {
            format!("alpha_bar({t})")
        })?;
    }

    let eps = random_image(&mut rng, shape, 1.0);
    let xt = forward_sample(&x, 60, &eps, &sched).map_err(e2s)?;
    let back = predict_x0(&xt, 60, &eps, &sched).map_err(e2s)?;
    ensure(back.mean_abs_diff(&x).unwrap() <= 1e-6, || {
        "predict_x0 does not invert forward_sample".into()
    })?;

    let mut worst = 0.0f64;
    for (t, tn) in [(0usize, 20usize), (20, 60), (60, 20), (200, 0)] {
        let z = ddim_step(&x, t, tn, &ZeroDenoiser, &sched).map_err(e2s)?;
        let k = (ab[tn] / ab[t]).sqrt();
        let c = 0.37;
        let cz = ddim_step(&x, t, tn, &ConstantDenoiser::new(c), &sched).map_err(e2s)?;
        for i in 0..x.as_slice().len() {
            let xi = x.as_slice()[i];
            worst = worst.max((z.as_slice()[i] - k * xi).abs());
            let want = ab[tn].sqrt() * (xi - (1.0 - ab[t]).sqrt() * c) / ab[t].sqrt()
                + (1.0 - ab[tn]).sqrt() * c;
            worst = worst.max((cz.as_slice()[i] - want).abs());
        }
    }
    ensure(worst <= 1e-6, || {
        format!("closed-form step error {worst:e}")
    })?;
    let ts = TimestepSequence::uniform(60, 20, 1000).map_err(e2s)?;
    let zr = round_trip(&x, &ZeroDenoiser, &sched, &ts, &ts).map_err(e2s)?;
    let zero_rt = zr.mean_abs_diff(&x).unwrap();
    ensure(zero_rt <= 1e-6, || {
        format!("zero-noise round trip error {zero_rt:e}")
    })?;

    let sc = ToyScenario::new(7);
    let sched = Arc::new(sched);
    let den = GaussianDenoiser::fit(&sc.denoiser_training, sched.clone(), 1e-3).map_err(e2s)?;
    let imgs: Vec<ImageBuffer> = sc.faces.iter().take(10).map(|f| f.image.clone()).collect();
    let err = |s_inv: usize, s_sam: usize| -> Result<f64, String> {
        let a = TimestepSequence::uniform(60, s_inv, 1000).map_err(e2s)?;
        let b = TimestepSequence::uniform(60, s_sam, 1000).map_err(e2s)?;
        let mut total = 0.0;
        for x in &imgs {
            total += round_trip(x, &den, &sched, &a, &b)
                .map_err(e2s)?
                .mean_abs_diff(x)
                .map_err(e2s)?;
        }
        Ok(total / imgs.len() as f64)
    };
    let full = err(60, 60)?;
    ensure(full <= ROUND_TRIP_BOUND, || {
        format!("full-discretization round trip {full:e} > {ROUND_TRIP_BOUND:e}")
    })?;
    let curve: Vec<f64> = (6..=20).map(|s| err(s, 6)).collect::<Result<_, _>>()?;
    for (k, w) in curve.windows(2).enumerate() {
        ensure(w[1] < w[0], || {
            format!("error rose from S_inv={} to {}: {:?}", k + 6, k + 7, w)
        })?;
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("took {secs:.1}s"))?;
    Ok(format!(
        "closed forms max err {worst:.1e}; full round trip {full:.4e} <= {ROUND_TRIP_BOUND:e}; \
         S_inv 6->20 error {:.4e} -> {:.4e} strictly decreasing; {secs:.1}s",
        curve[0],
        curve[curve.len() - 1]
    ))
}

// ----------------------------------------------------- 2: gradient checks

const GRAD_TOL: f64 = 1e-3;

/// Relative error between the tape gradient and central differences of
/// `f` at `x0`.
fn grad_check(x0: &[f64], h: f64, f: &dyn Fn(&mut Tape, Var) -> Var) -> Result<f64, String> {
    let mut tape = Tape::new();
    let xv = tape.var(x0.to_vec());
    let out = f(&mut tape, xv);
    let g = tape.backward(out).wrt(xv, x0.len());
    let eval = |x: &[f64]| {
        let mut t = Tape::new();
        let v = t.constant(x.to_vec());
        let o = f(&mut t, v);
        t.scalar(o)
    };
    let mut num = Vec::with_capacity(x0.len());
    let mut x = x0.to_vec();
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let up = eval(&x);
        x[i] = orig - h;
        let down = eval(&x);
        x[i] = orig;
        num.push((up - down) / (2.0 * h));
    }
    let diff: f64 = g
        .iter()
        .zip(&num)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale: f64 = num.iter().map(|v| v * v).sum::<f64>().sqrt();
    if scale == 0.0 {
        return Err("finite-difference gradient is zero".into());
    }
    Ok(diff / scale)
}

fn criterion_gradients() -> Check {
    let start = Instant::now();
    let shape = ImageShape::new(8, 8);
    let mut rng = stream_rng(2, "acceptance/gradients");
    let reg = EncoderRegistry::new(5, shape);
    let enc = reg.image_encoder("toy-linear-16").map_err(e2s)?;
    let face = reg.face_embedder("toy-face-0").map_err(e2s)?;
    let ensemble = reg
        .face_embedders(&[
            "toy-face-0".into(),
            "toy-face-1".into(),
            "toy-face-2".into(),
        ])
        .map_err(e2s)?;
    let perc = reg.perceptual("toy-perceptual").map_err(e2s)?;

    let xp = random_image(&mut rng, shape, 0.8);
    let x = random_image(&mut rng, shape, 0.8);
    let y = random_image(&mut rng, shape, 0.8);
    let dref: Vec<f64> = (0..enc.dim())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let ex = enc.embed_image(&x).map_err(e2s)?;
    let ey = face.face_embed(&y).map_err(e2s)?;
    let targets: Vec<Embedding> = ensemble.iter().map(|m| m.face_embed(&y).unwrap()).collect();

    let labels: Vec<u8> = (0..64).map(|_| rng.random_range(0..4u8)).collect();
    let masks_x = RegionMasks::new(8, 8, labels).map_err(e2s)?;
    let labels: Vec<u8> = (0..64).map(|_| rng.random_range(0..4u8)).collect();
    let masks_y = RegionMasks::new(8, 8, labels).map_err(e2s)?;
    let hm = hm_image(&xp, &y, &masks_x, &masks_y).map_err(e2s)?;
    let min_gap = xp
        .as_slice()
        .iter()
        .zip(hm.image.as_slice())
        .zip(&hm.matched)
        .filter(|(_, m)| **m)
        .map(|((a, b), _)| (a - b).abs())
        .fold(f64::INFINITY, f64::min);
    ensure(min_gap > 1e-4, || {
        format!("pixel loss evaluated too close to a kink ({min_gap:e})")
    })?;

    let mut results: Vec<(&str, f64)> = Vec::new();
    let h = 1e-6;
    results.push((
        "direction",
        grad_check(xp.as_slice(), h, &|t, v| {
            let e = enc.embed_on_tape(t, v, shape).unwrap();
            let c = t.constant(ex.as_slice().to_vec());
            let d = t.sub(e, c);
            let r = t.constant(dref.clone());
            graph::direction_loss(t, d, r, TRAINING_GUARD).unwrap()
        })?,
    ));
    results.push((
        "pixel-makeup",
        grad_check(xp.as_slice(), h, &|t, v| {
            graph::pixel_makeup_loss(t, v, hm.image.as_slice(), &hm.matched)
        })?,
    ));
    results.push((
        "ensemble-attack",
        grad_check(xp.as_slice(), h, &|t, v| {
            let embs: Vec<Var> = ensemble
                .iter()
                .map(|m| m.embed_on_tape(t, v, shape).unwrap())
                .collect();
            let tg: Vec<Var> = targets
                .iter()
                .map(|e| t.constant(e.as_slice().to_vec()))
                .collect();
            graph::ensemble_attack(t, &embs, &tg, TRAINING_GUARD)
                .unwrap()
                .0
        })?,
    ));
    results.push((
        "visual",
        grad_check(xp.as_slice(), h, &|t, v| {
            let xv = t.constant(x.as_slice().to_vec());
            graph::visual_loss(t, v, xv, perc.as_ref(), shape, 1.0).unwrap()
        })?,
    ));
    results.push((
        "identity",
        grad_check(xp.as_slice(), h, &|t, v| {
            let e = face.embed_on_tape(t, v, shape).unwrap();
            let c = t.constant(ey.as_slice().to_vec());
            graph::identity_loss(t, e, c, TRAINING_GUARD).unwrap()
        })?,
    ));

    // Three sampling steps, differentiated with respect to both parameters.
    let sched = NoiseSchedule::default();
    let ts = TimestepSequence::uniform(60, 3, 1000).map_err(e2s)?;
    let den = TanhAffineDenoiser::new(0.6, 0.05);
    let latent = random_image(&mut rng, shape, 1.0);
    let weights: Vec<f64> = (0..shape.len())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    results.push((
        "ddim-chain",
        grad_check(den.params(), 1e-6, &|t, p| {
            let z = t.constant(latent.as_slice().to_vec());
            let out = sample_on_tape(t, z, &den, p, shape, &sched, &ts).unwrap();
            let w = t.constant(weights.clone());
            t.dot(out, w)
        })?,
    ));

    for (name, rel) in &results {
        ensure(*rel <= GRAD_TOL, || {
            format!("{name}: relative error {rel:e} > {GRAD_TOL:e}")
        })?;
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("took {secs:.1}s"))?;
    let worst = results.iter().map(|r| r.1).fold(0.0, f64::max);
    Ok(format!(
        "{} gradients within {GRAD_TOL:e} (worst {worst:.1e}); {secs:.1}s",
        results.len()
    ))
}

// ------------------------------------------------ 3: histogram matching

/// Sort-and-assign by brute force: rank by counting, quantile by position.
fn oracle_match(src: &[f64], reference: &[f64]) -> Vec<f64> {
    let mut sorted = reference.to_vec();
    // Selection sort keeps the oracle free of library sorting.
    for i in 0..sorted.len() {
        let mut k = i;
        for j in i + 1..sorted.len() {
            if sorted[j] < sorted[k] {
                k = j;
            }
        }
        sorted.swap(i, k);
    }
    let (n, m) = (src.len(), sorted.len());
    (0..n)
        .map(|i| {
            let rank = (0..n)
                .filter(|&j| src[j] < src[i] || (src[j] == src[i] && j < i))
                .count();
            if n == m {
                return sorted[rank];
            }
            let pos = if n == 1 {
                (m - 1) as f64 / 2.0
            } else {
                rank as f64 * (m - 1) as f64 / (n - 1) as f64
            };
            let lo = pos.floor() as usize;
            let frac = pos - lo as f64;
            if lo + 1 < m {
                sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac
            } else {
                sorted[lo]
            }
        })
        .collect()
}

fn oracle_hm(
    x: &ImageBuffer,
    y: &ImageBuffer,
    mx: &RegionMasks,
    my: &RegionMasks,
) -> (ImageBuffer, bool) {
    let mut out = x.clone();
    let mut all_equal_len = true;
    for region in [Region::Skin, Region::Lips, Region::Eyes] {
        let px = mx.pixels(region);
        let py = my.pixels(region);
        if px.is_empty() || py.is_empty() {
            continue;
        }
        all_equal_len &= px.len() == py.len();
        for ch in 0..3 {
            let src: Vec<f64> = px.iter().map(|&p| x.as_slice()[p * 3 + ch]).collect();
            let rf: Vec<f64> = py.iter().map(|&p| y.as_slice()[p * 3 + ch]).collect();
            for (k, v) in oracle_match(&src, &rf).into_iter().enumerate() {
                out.as_mut_slice()[px[k] * 3 + ch] = v;
            }
        }
    }
    (out, all_equal_len)
}

fn criterion_histogram() -> Check {
    let mut rng = stream_rng(3, "acceptance/hm");
    let (mut exact_cases, mut interp_cases, mut worst_interp) = (0, 0, 0.0f64);
    for case in 0..200 {
        let (h, w) = (rng.random_range(2..7), rng.random_range(2..7));
        let shape = ImageShape::new(h, w);
        let quantize = case % 3 == 0;
        let img = |rng: &mut ChaCha8Rng| {
            ImageBuffer::from_fn(shape, |_, _, _| {
                let v: f64 = rng.random_range(-1.0..1.0);
                if quantize {
                    (v * 4.0).round() / 4.0
                } else {
                    v
                }
            })
        };
        let x = img(&mut rng);
        let y = img(&mut rng);
        let lx: Vec<u8> = (0..h * w).map(|_| rng.random_range(0..4u8)).collect();
        let ly: Vec<u8> = if case % 2 == 0 {
            // Same label counts, shuffled: every region has equal length.
            let mut l = lx.clone();
            for i in (1..l.len()).rev() {
                l.swap(i, rng.random_range(0..=i));
            }
            l
        } else {
            (0..h * w).map(|_| rng.random_range(0..4u8)).collect()
        };
        let mx = RegionMasks::new(h, w, lx).map_err(e2s)?;
        let my = RegionMasks::new(h, w, ly).map_err(e2s)?;
        let got = hm_image(&x, &y, &mx, &my).map_err(e2s)?.image;
        let (want, equal_len) = oracle_hm(&x, &y, &mx, &my);
        if equal_len {
            ensure(got == want, || {
                format!("case {case}: equal-length regions differ from oracle")
            })?;
            exact_cases += 1;
        } else {
            let err = got
                .as_slice()
                .iter()
                .zip(want.as_slice())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            ensure(err <= 1e-6, || {
                format!("case {case}: interpolated error {err:e}")
            })?;
            worst_interp = worst_interp.max(err);
            interp_cases += 1;
        }
        ensure(hm_image(&x, &x, &mx, &mx).map_err(e2s)?.image == x, || {
            format!("case {case}: hm(x, x) != x")
        })?;
        let c = 0.25;
        let flat = ImageBuffer::filled(shape, c);
        let hc = hm_image(&x, &flat, &mx, &my).map_err(e2s)?;
        for (i, m) in hc.matched.iter().enumerate() {
            let v = hc.image.as_slice()[i];
            ensure(if *m { v == c } else { v == x.as_slice()[i] }, || {
                format!("case {case}: constant reference not reproduced at entry {i}")
            })?;
        }
    }
    Ok(format!(
        "200 instances: {exact_cases} exact equal-length, {interp_cases} interpolated (max err {worst_interp:.1e}); \
         identity and constant cases exact"
    ))
}

// -------------------------------------------------------- 4: thresholds

fn oracle_threshold(scores: &[f64], far: f64) -> (f64, bool) {
    let allowed = (scores.len() as f64 * far + 1e-12).floor() as usize;
    let mut best: Option<f64> = None;
    for &s in scores {
        let above = scores.iter().filter(|&&v| v >= s).count();
        if above <= allowed && best.is_none_or(|b| s < b) {
            best = Some(s);
        }
    }
    match best {
        Some(t) => (t, false),
        None => (
            scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + SATURATION_EPS,
            true,
        ),
    }
}

fn criterion_threshold() -> Check {
    let mut rng = stream_rng(4, "acceptance/threshold");
    let mut saturated = 0;
    for case in 0..500 {
        let n = rng.random_range(1..400);
        let ties = case % 2 == 0;
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                let v: f64 = rng.random_range(-1.0..1.0);
                if ties {
                    (v * 20.0).round() / 20.0
                } else {
                    v
                }
            })
            .collect();
        for far in [0.01, 0.1] {
            let got = calibrate_threshold(&scores, far).map_err(e2s)?;
            let (tau, sat) = oracle_threshold(&scores, far);
            ensure(got.tau == tau && got.saturated == sat, || {
                format!(
                    "case {case} far {far}: got {} / {}, oracle {tau} / {sat}",
                    got.tau, got.saturated
                )
            })?;
            saturated += sat as usize;
            let false_accepts = scores.iter().filter(|&&s| s > got.tau).count() as f64;
            ensure(false_accepts / n as f64 <= far, || {
                format!("case {case}: empirical FAR above {far}")
            })?;
        }
        let mut prev = f64::INFINITY;
        for k in 0..=40 {
            let tau = -1.1 + k as f64 * 0.055;
            let asr = asr_from_scores(&scores, tau).map_err(e2s)?;
            ensure(asr <= prev, || {
                format!("case {case}: ASR rose at tau {tau}")
            })?;
            prev = asr;
        }
    }

    let sc = ToyScenario::new(7);
    let reg = EncoderRegistry::new(derive_seed(7, "models"), sc.shape());
    let emb = reg.face_embedder("toy-face-3").map_err(e2s)?;
    let embs: Vec<Embedding> = sc
        .faces
        .iter()
        .map(|f| emb.face_embed(&f.image).unwrap())
        .collect();
    let mut impostor = Vec::new();
    for i in 0..sc.faces.len() {
        for j in i + 1..sc.faces.len() {
            if sc.faces[i].identity != sc.faces[j].identity {
                impostor.push(embs[i].cosine(&embs[j]).unwrap());
            }
        }
    }
    let th = calibrate_threshold(&impostor, 0.01).map_err(e2s)?;
    let target = sc.target.image.clone();
    let self_asr = attack_success_rate(std::slice::from_ref(&target), &target, emb.as_ref(), &th)
        .map_err(e2s)?;
    ensure(self_asr.asr == 1.0, || {
        format!("self-target ASR {}", self_asr.asr)
    })?;
    Ok(format!(
        "500 vectors x FAR {{0.01, 0.1}} match brute force ({saturated} saturated); ASR monotone; self-target ASR 1.0 (tau {:.4})",
        th.tau
    ))
}

// ----------------------------------------------------------- 5: metrics

/// `Tr √(A·B)` for 2×2 SPD matrices.
fn trace_sqrt_2x2(a: [[f64; 2]; 2], b: [[f64; 2]; 2]) -> f64 {
    let tr = a[0][0] * b[0][0] + a[0][1] * b[1][0] + a[1][0] * b[0][1] + a[1][1] * b[1][1];
    let det = |m: [[f64; 2]; 2]| m[0][0] * m[1][1] - m[0][1] * m[1][0];
    (tr + 2.0 * (det(a) * det(b)).sqrt()).sqrt()
}

fn gaussian_fid_2d(a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
    let stats = |s: &[[f64; 2]]| {
        let n = s.len() as f64;
        let m = [
            s.iter().map(|p| p[0]).sum::<f64>() / n,
            s.iter().map(|p| p[1]).sum::<f64>() / n,
        ];
        let mut c = [[0.0; 2]; 2];
        for p in s {
            for i in 0..2 {
                for j in 0..2 {
                    c[i][j] += (p[i] - m[i]) * (p[j] - m[j]) / (n - 1.0);
                }
            }
        }
        (m, c)
    };
    let (ma, ca) = stats(a);
    let (mb, cb) = stats(b);
    let mean = (ma[0] - mb[0]).powi(2) + (ma[1] - mb[1]).powi(2);
    mean + ca[0][0] + ca[1][1] + cb[0][0] + cb[1][1] - 2.0 * trace_sqrt_2x2(ca, cb)
}

fn criterion_metrics() -> Check {
    let mut rng = stream_rng(5, "acceptance/metrics");
    let shape = ImageShape::new(16, 16);
    let a = random_image(&mut rng, shape, 1.0);
    let b = random_image(&mut rng, shape, 1.0);
    ensure(psnr(&a, &a).map_err(e2s)? == f64::INFINITY, || {
        "psnr(a, a) is not +inf".into()
    })?;
    ensure(ssim(&a, &a).map_err(e2s)? == 1.0, || {
        "ssim(a, a) != 1".into()
    })?;
    let feats = |rng: &mut ChaCha8Rng, n: usize, d: usize, shift: f64| -> Vec<Embedding> {
        (0..n)
            .map(|_| {
                Embedding::new(
                    (0..d)
                        .map(|_| rng.random_range(-1.0..1.0) + shift)
                        .collect(),
                )
                .unwrap()
            })
            .collect()
    };
    let fa = feats(&mut rng, 30, 4, 0.0);
    ensure(fid(&fa, &fa).map_err(e2s)? == 0.0, || {
        "fid(A, A) != 0".into()
    })?;

    let mut worst_fid = 0.0f64;
    for k in 0..20 {
        let pts = |rng: &mut ChaCha8Rng, n: usize, sx: f64, sy: f64, rho: f64, shift: f64| {
            (0..n)
                .map(|_| {
                    let u: f64 = rng.random_range(-1.0..1.0);
                    let v: f64 = rng.random_range(-1.0..1.0);
                    [sx * u + shift, sy * (rho * u + v) - shift]
                })
                .collect::<Vec<[f64; 2]>>()
        };
        let pa = pts(&mut rng, 40 + k, 1.0, 0.5, 0.3, 0.0);
        let pb = pts(&mut rng, 35 + k, 0.4, 1.3, -0.8, 0.2 * k as f64);
        let emb = |p: &[[f64; 2]]| {
            p.iter()
                .map(|q| Embedding::new(q.to_vec()).unwrap())
                .collect::<Vec<_>>()
        };
        let got = fid(&emb(&pa), &emb(&pb)).map_err(e2s)?;
        let want = gaussian_fid_2d(&pa, &pb);
        worst_fid = worst_fid.max((got - want).abs());
    }
    ensure(worst_fid <= 1e-4, || {
        format!("fid vs Gaussian oracle error {worst_fid:e}")
    })?;

    let fb = feats(&mut rng, 25, 4, 0.3);
    let asym = [
        (psnr(&a, &b).map_err(e2s)? - psnr(&b, &a).map_err(e2s)?).abs(),
        (ssim(&a, &b).map_err(e2s)? - ssim(&b, &a).map_err(e2s)?).abs(),
        (fid(&fa, &fb).map_err(e2s)? - fid(&fb, &fa).map_err(e2s)?).abs(),
    ];
    let worst_sym = asym.iter().cloned().fold(0.0, f64::max);
    ensure(worst_sym <= 1e-6, || format!("asymmetry {asym:?}"))?;
    Ok(format!(
        "identity cases exact; fid vs 2-D Gaussian oracle max err {worst_fid:.1e}; max asymmetry {worst_sym:.1e}"
    ))
}

// ----------------------------------------------- 6 and 7: toy pipeline

struct ToyRig {
    sc: ToyScenario,
    sched: NoiseSchedule,
    den: GaussianDenoiser,
    reg: EncoderRegistry,
    style: ReferenceStyle,
}

impl ToyRig {
    fn new(seed: u64) -> Result<Self, String> {
        let sc = ToyScenario::new(seed);
        let sched = Arc::new(NoiseSchedule::default());
        let den = GaussianDenoiser::fit(&sc.denoiser_training, sched.clone(), 1e-3).map_err(e2s)?;
        let reg = EncoderRegistry::new(derive_seed(seed, "models"), sc.shape());
        let joint = reg.joint("toy-linear-64", "toy-text-64").map_err(e2s)?;
        let identity = reg.face_embedder("toy-face-0").map_err(e2s)?;
        let perc = reg.perceptual("toy-perceptual").map_err(e2s)?;
        let models = RemovalModels {
            encoders: &joint,
            identity: identity.as_ref(),
            perceptual: perc.as_ref(),
        };
        let removal = run_makeup_removal(
            std::slice::from_ref(&sc.reference.image),
            &den,
            &sched,
            models,
            &toy_removal_config(),
        )
        .map_err(e2s)?;
        let style = ReferenceStyle::new(
            sc.reference.image.clone(),
            removal.clean[0].clone(),
            sc.reference.masks.clone(),
            joint.image(),
        )
        .map_err(e2s)?;
        Ok(Self {
            sched: (*sched).clone(),
            sc,
            den,
            reg,
            style,
        })
    }

    fn transfer(
        &self,
        tweak: impl FnOnce(&mut makeup_shield_core::pipeline::FineTuneConfig),
    ) -> Result<TransferArtifacts, String> {
        let mut cfg = toy_transfer_config();
        tweak(&mut cfg);
        let enc = self.reg.image_encoder("toy-linear-64").map_err(e2s)?;
        let ensemble = self
            .reg
            .face_embedders(&[
                "toy-face-0".into(),
                "toy-face-1".into(),
                "toy-face-2".into(),
            ])
            .map_err(e2s)?;
        let perc = self.reg.perceptual("toy-perceptual").map_err(e2s)?;
        run_adversarial_transfer(
            &self.sc.source_images(),
            &self.sc.source_masks(),
            &self.style,
            &self.sc.target.image,
            &self.den,
            &self.sched,
            TransferModels {
                image_encoder: enc.as_ref(),
                ensemble: &ensemble,
                perceptual: perc.as_ref(),
            },
            &cfg,
        )
        .map_err(e2s)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn criterion_transfer(rig: &ToyRig) -> Check {
    let start = Instant::now();
    let full = rig.transfer(|_| {})?;
    let ablated = rig.transfer(|c| c.weights.direction = 0.0)?;
    ensure(full.tag != ablated.tag, || {
        "ablation tag not distinct".into()
    })?;

    let n = rig.sc.sources.len();
    let first = full.log[0].total;
    let epochs = full.log.len() / n;
    let last_same_image = full.log[(epochs - 1) * n].total;
    let ratio = last_same_image / first;
    ensure(ratio <= 0.5, || {
        format!("objective on image 0 went {first:.4} -> {last_same_image:.4} (ratio {ratio:.3})")
    })?;

    let held_out = rig.reg.face_embedder("toy-face-3").map_err(e2s)?;
    let t = held_out.face_embed(&rig.sc.target.image).map_err(e2s)?;
    let cos_mean = |imgs: &[ImageBuffer]| -> f64 {
        mean(
            &imgs
                .iter()
                .map(|i| held_out.face_embed(i).unwrap().cosine(&t).unwrap())
                .collect::<Vec<_>>(),
        )
    };
    let clean = cos_mean(&rig.sc.source_images());
    let protected = cos_mean(&full.protected);
    ensure(protected > clean, || {
        format!("held-out cosine {protected:.4} <= clean {clean:.4}")
    })?;

    let (dir_full, dir_abl) = (
        mean(&full.direction_cosines),
        mean(&ablated.direction_cosines),
    );
    ensure(dir_abl < dir_full, || {
        format!("direction alignment without the direction loss {dir_abl:.4} >= {dir_full:.4}")
    })?;
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 600.0, || format!("took {secs:.1}s"))?;
    Ok(format!(
        "(a) objective {first:.4} -> {last_same_image:.4} (ratio {ratio:.3}); \
         (b) held-out cosine {clean:.4} -> {protected:.4}; \
         (c) direction alignment {dir_full:.4} vs {dir_abl:.4} without it; {secs:.1}s"
    ))
}

fn criterion_reduced_t(rig: &ToyRig) -> Check {
    let sources = rig.sc.source_images();
    let masks = rig.sc.source_masks();
    let mut devs = Vec::new();
    for t0 in [60, 100, 200] {
        let art = rig.transfer(|c| c.t0 = t0)?;
        let (mut sum, mut count) = (0.0, 0usize);
        for ((p, x), m) in art.protected.iter().zip(&sources).zip(&masks) {
            for (px, label) in m.labels().iter().enumerate() {
                if *label == 0 {
                    for ch in 0..3 {
                        sum += (p.as_slice()[px * 3 + ch] - x.as_slice()[px * 3 + ch]).abs();
                        count += 1;
                    }
                }
            }
        }
        devs.push((t0, sum / count as f64));
    }
    for w in devs.windows(2) {
        ensure(w[1].1 >= w[0].1, || {
            format!("background deviation fell: {devs:?}")
        })?;
    }
    Ok(format!(
        "background deviation {}",
        devs.iter()
            .map(|(t, d)| format!("t0={t}: {d:.4}"))
            .collect::<Vec<_>>()
            .join(", ")
    ))
}

// -------------------------------------------------------- 8: determinism

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    std::fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

fn cli(args: &[&str], cwd: &Path) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_makeup-shield"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "error")
        .env_remove("FACECOMPARE_ENDPOINT")
        .env_remove("FACECOMPARE_KEY")
        .output()
        .map_err(e2s)?;
    ensure(out.status.success(), || {
        format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr))
    })
}

fn criterion_determinism() -> Check {
    let dir = tempfile::tempdir().map_err(e2s)?;
    let root = dir.path();
    for g in ["gen-0", "gen-1"] {
        cli(&["generate-toy-data", "--out", g, "--seed", "7"], root)?;
    }
    ensure(
        tree(&root.join("gen-0")) == tree(&root.join("gen-1")),
        || "generate-toy-data outputs differ".into(),
    )?;
    let data = root.join("gen-0");
    cli(
        &["transfer", "--config", "config.toml", "--out", "base"],
        &data,
    )?;
    let runs: [(&str, &[&str]); 6] = [
        ("remove-makeup", &[]),
        ("transfer", &[]),
        ("protect", &["--artifacts", "base/transfer/tuned.json"]),
        ("evaluate", &["--manifest", "base/manifest.json"]),
        ("calibrate-threshold", &[]),
        (
            "compare-api",
            &[
                "--manifest",
                "base/manifest.json",
                "--mock-embedder",
                "toy-face-3",
            ],
        ),
    ];
    let mut compared = 0;
    for (cmd, extra) in runs {
        let mut trees = Vec::new();
        for k in 0..2 {
            let out = format!("{cmd}-{k}");
            let mut args = vec![cmd, "--config", "config.toml", "--out", out.as_str()];
            args.extend_from_slice(extra);
            cli(&args, &data)?;
            let mut t = tree(&data.join(&out));
            // Wall-clock latencies are recorded apart from the manifest.
            t.remove(Path::new("api_timings.json"));
            trees.push(t);
        }
        ensure(trees[0].contains_key(Path::new("manifest.json")), || {
            format!("{cmd}: no manifest")
        })?;
        for (name, bytes) in &trees[0] {
            ensure(trees[1].get(name) == Some(bytes), || {
                format!("{cmd}: {} differs", name.display())
            })?;
        }
        ensure(trees[0].len() == trees[1].len(), || {
            format!("{cmd}: file sets differ")
        })?;
        compared += trees[0].len();
    }
    Ok(format!(
        "7 subcommands run twice; {compared} output files byte-identical"
    ))
}

// ------------------------------------------------------------ 9: API

fn small_img(seed: usize) -> ImageBuffer {
    ImageBuffer::from_fn(ImageShape::new(8, 8), |r, c, ch| {
        (((r * 7 + c * 3 + ch * 5 + seed * 11) % 17) as f64 / 8.5) - 1.0
    })
}

async fn api_checks() -> Check {
    let client = |endpoint: String, tweak: &dyn Fn(&mut ClientConfig)| {
        let mut cfg = ClientConfig {
            endpoint,
            rate_limit: 1000.0,
            ..ClientConfig::default()
        };
        tweak(&mut cfg);
        CompareClient::new(cfg).map_err(e2s)
    };
    let (a, b) = (small_img(0), small_img(1));

    let mock = MockServer::start(MockMode::Fixed(73.5), None)
        .await
        .map_err(e2s)?;
    let r = client(mock.endpoint(), &|_| {})?
        .compare(&a, &b)
        .await
        .map_err(e2s)?;
    ensure(r.confidence == 73.5, || {
        format!("echo gave {}", r.confidence)
    })?;

    let mode = MockMode::Scripted {
        replies: vec![MockReply::Status(429), MockReply::Status(429)],
        then: 61.0,
    };
    let mock = MockServer::start(mode, None).await.map_err(e2s)?;
    let r = client(mock.endpoint(), &|_| {})?
        .compare(&a, &b)
        .await
        .map_err(e2s)?;
    let arr = mock.arrivals();
    ensure(r.attempts == 3 && r.latency_ms >= 1500.0, || {
        format!("retry result {r:?}")
    })?;
    ensure(
        arr[1] - arr[0] >= Duration::from_millis(500)
            && arr[2] - arr[1] >= Duration::from_millis(1000),
        || "backoff shorter than 0.5 s then 1 s".into(),
    )?;

    let mode = MockMode::Scripted {
        replies: vec![MockReply::Status(503); 5],
        then: 1.0,
    };
    let mock = MockServer::start(mode, None).await.map_err(e2s)?;
    let r = client(mock.endpoint(), &|c| c.backoff_base_ms = 5)?
        .compare(&a, &b)
        .await;
    ensure(
        matches!(r, Err(ApiError::RetriesExhausted { attempts: 4, .. })),
        || format!("expected exhaustion after 3 retries, got {r:?}"),
    )?;

    let mock = MockServer::start(MockMode::Fixed(120.0), None)
        .await
        .map_err(e2s)?;
    let r = client(mock.endpoint(), &|_| {})?.compare(&a, &b).await;
    ensure(matches!(r, Err(ApiError::OutOfRange(_))), || {
        format!("120 accepted: {r:?}")
    })?;

    let mode = MockMode::Scripted {
        replies: vec![MockReply::Malformed],
        then: 1.0,
    };
    let mock = MockServer::start(mode, None).await.map_err(e2s)?;
    let r = client(mock.endpoint(), &|_| {})?.compare(&a, &b).await;
    ensure(matches!(r, Err(ApiError::Malformed(_))), || {
        format!("malformed accepted: {r:?}")
    })?;

    let mock = MockServer::start(MockMode::Fixed(10.0), Some("k".into()))
        .await
        .map_err(e2s)?;
    let r = client(mock.endpoint(), &|c| c.api_key = Some("wrong".into()))?
        .compare(&a, &b)
        .await;
    ensure(
        matches!(r, Err(ApiError::Auth { .. })) && mock.arrivals().len() == 1,
        || format!("auth failure retried or misreported: {r:?}"),
    )?;

    let rate = 20.0;
    let mock = MockServer::start(MockMode::Fixed(5.0), None)
        .await
        .map_err(e2s)?;
    let c = client(mock.endpoint(), &|c| {
        c.rate_limit = rate;
        c.concurrency = 6;
    })?;
    let imgs: Vec<ImageBuffer> = (0..12).map(small_img).collect();
    c.batch_compare(&imgs, &b).await.map_err(e2s)?;
    let mut arr = mock.arrivals();
    arr.sort();
    let interval = Duration::from_secs_f64(1.0 / rate);
    let slack = Duration::from_millis(15);
    for k in 2..=arr.len() {
        for w in arr.windows(k) {
            let span = *w.last().unwrap() - w[0];
            ensure(span + slack >= interval * (k as u32 - 1), || {
                format!("{k} requests within {span:?}")
            })?;
        }
    }

    let emb: Arc<dyn FaceEmbedder> = EncoderRegistry::new(5, ImageShape::new(8, 8))
        .face_embedder("toy-face-0")
        .map_err(e2s)?;
    let mock = MockServer::start(MockMode::Embedder(emb.clone()), None)
        .await
        .map_err(e2s)?;
    let imgs: Vec<ImageBuffer> = (0..10).map(small_img).collect();
    let target = small_img(42);
    let rep = client(mock.endpoint(), &|_| {})?
        .batch_compare(&imgs, &target)
        .await
        .map_err(e2s)?;
    let q = |i: &ImageBuffer| decode_png(&encode_png(i).unwrap()).unwrap();
    let te = emb.face_embed(&q(&target)).map_err(e2s)?;
    let local: Vec<f64> = imgs
        .iter()
        .map(|i| embedder_confidence(emb.face_embed(&q(i)).unwrap().cosine(&te).unwrap()))
        .collect();
    let want = Summary::from_confidences(&local, 0);
    ensure(rep.summary.n == 10 && rep.summary.failures == 0, || {
        format!("{:?}", rep.summary)
    })?;
    let diff = [
        (rep.summary.mean, want.mean),
        (rep.summary.median, want.median),
        (rep.summary.std, want.std),
    ]
    .iter()
    .map(|(g, w)| (g.unwrap() - w.unwrap()).abs())
    .fold(0.0, f64::max);
    ensure(diff <= 1e-9, || {
        format!("batch summary differs from local recomputation by {diff:e}")
    })?;
    Ok(format!(
        "echo, 429 retry, exhaustion, range, malformed, auth, rate limit {rate}/s verified; \
         batch mean {:.3} matches local recomputation (diff {diff:.1e})",
        want.mean.unwrap()
    ))
}

fn criterion_api() -> Check {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(e2s)?;
    rt.block_on(api_checks())
}

// ---------------------------------------------------------------- driver

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |n: usize, name: &str, r: std::thread::Result<Check>| {
        let line = match r {
            Ok(Ok(detail)) => format!("PASS criterion {n} ({name}): {detail}"),
            Ok(Err(why)) => {
                failed += 1;
                format!("FAIL criterion {n} ({name}): {why}")
            }
            Err(_) => {
                failed += 1;
                format!("FAIL criterion {n} ({name}): panicked")
            }
        };
        println!("{line}");
    };
    report(1, "ddim analytics", catch_unwind(criterion_ddim));
    report(2, "gradient checks", catch_unwind(criterion_gradients));
    report(
        3,
        "histogram matching oracle",
        catch_unwind(criterion_histogram),
    );
    report(
        4,
        "threshold and ASR protocol",
        catch_unwind(criterion_threshold),
    );
    report(5, "metric correctness", catch_unwind(criterion_metrics));
    let rig = catch_unwind(|| ToyRig::new(7));
    let rig = match rig {
        Ok(Ok(r)) => Some(r),
        Ok(Err(e)) => {
            eprintln!("toy pipeline setup failed: {e}");
            None
        }
        Err(_) => None,
    };
    match &rig {
        Some(r) => {
            report(
                6,
                "toy end-to-end transfer",
                catch_unwind(AssertUnwindSafe(|| criterion_transfer(r))),
            );
            report(
                7,
                "reduced-t preservation",
                catch_unwind(AssertUnwindSafe(|| criterion_reduced_t(r))),
            );
        }
        None => {
            report(
                6,
                "toy end-to-end transfer",
                Ok(Err("toy setup failed".into())),
            );
            report(
                7,
                "reduced-t preservation",
                Ok(Err("toy setup failed".into())),
            );
        }
    }
    report(8, "cli determinism", catch_unwind(criterion_determinism));
    report(9, "api client against mock", catch_unwind(criterion_api));
    if failed == 0 {
        println!("acceptance: 9/9 criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} of 9 criteria failed");
        ExitCode::FAILURE
    }
}
