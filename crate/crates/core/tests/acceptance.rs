//! Acceptance suite. Runs without the libtest harness so that every
//! criterion prints exactly one PASS/FAIL line; exits non-zero on any FAIL.

use std::collections::HashMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use suplid::config::{Config, REFERENCE_FEATURE_DIM};
use suplid::coreset::{
    build_coreset, build_coreset_with_report, Coreset, CoresetParams, CoresetStrategy,
    SuperpixelRecord,
};
use suplid::eval::evaluate;
use suplid::eval::evaluate_anomaly;
use suplid::lid::{batch_lid, knn_search, lid_mle, LidParams};
use suplid::matrix::Matrix;
use suplid::pipeline::{analyze_training, Aggregation, ImageInputs, Scorer, ScoringConfig};
use suplid::scores::{aggregate_confidence, guidance_score, ConfidenceMethod, GuidanceMethod};
use suplid::superpixel::{slic_segment, SlicParams, SuperpixelPartition};
use suplid::synth::{make_manifold_samples, OodKind, SynthSpec, SynthWorld};
use suplid::tensorio::Tensor;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(
        elapsed < limit,
        format!("took {:.2?}, limit {:.0?}", elapsed, limit),
    )
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

// --- 1 ----------------------------------------------------------------------

fn estimator_arithmetic() -> Check {
    let t = Instant::now();
    let ln2 = std::f64::consts::LN_2;
    let p = LidParams::with_k(2);
    let a = lid_mle(&[1.0, 2.0], &p).map_err(|e| e.to_string())?;
    let b = lid_mle(&[1.0, 2.0, 4.0, 8.0], &p).map_err(|e| e.to_string())?;
    let c = lid_mle(&[3.0, 3.0, 3.0], &p).map_err(|e| e.to_string())?;
    ensure(rel(a, 2.0 / ln2) < 1e-9, format!("[1,2] -> {a}"))?;
    ensure(
        rel(b, 4.0 / (6.0 * ln2)) < 1e-9,
        format!("[1,2,4,8] -> {b}"),
    )?;
    ensure(c == p.lid_cap, format!("equal distances -> {c}"))?;
    within(t.elapsed(), Duration::from_secs(1))?;
    Ok(format!("{a:.9}, {b:.9}, cap {c:e}"))
}

// --- 2 ----------------------------------------------------------------------

fn estimator_consistency() -> Check {
    let t = Instant::now();
    let mut out = Vec::new();
    // (d, ambient, noise, n, k, range): the 8-D Gaussian, then a noiseless 2-D plane.
    let cases = [
        (8usize, 64, 0.01, 5000, 100, 6.0, 10.0),
        (2, 32, 0.0, 300, 50, 1.5, 2.6),
    ];
    for (d, ambient, noise, n, k, lo, hi) in cases {
        let mut spec = SynthSpec::new(1, d, ambient, 1.0, [8, 8], OodKind::Far, 2024);
        spec.noise_sigma = noise;
        let z = make_manifold_samples(&spec, 0, n).map_err(|e| e.to_string())?;
        let lids = batch_lid(&z, &z, &LidParams::with_k(k), true).map_err(|e| e.to_string())?;
        let m = median(lids);
        ensure(
            (lo..=hi).contains(&m),
            format!("d={d}: median {m:.3} outside [{lo}, {hi}]"),
        )?;
        out.push(format!("d={d} median {m:.3}"));
    }
    within(t.elapsed(), Duration::from_secs(30))?;
    Ok(out.join(", "))
}

// --- 3 ----------------------------------------------------------------------

fn knn_exactness() -> Check {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for inst in 0..100 {
        let m = if inst % 10 == 0 {
            10_000
        } else {
            rng.random_range(1..=3000)
        };
        let d = if inst % 7 == 0 {
            304
        } else {
            rng.random_range(1..=304)
        };
        let data: Vec<f32> = (0..m * d)
            .map(|_| rng.sample::<f32, _>(StandardNormal))
            .collect();
        let pool = Matrix::new(m, d, data).map_err(|e| e.to_string())?;
        let k = rng.random_range(1..=m.min(64));
        for _ in 0..2 {
            let q: Vec<f32> = (0..d)
                .map(|_| rng.sample::<f32, _>(StandardNormal))
                .collect();
            let got = knn_search(&q, &pool, k).map_err(|e| e.to_string())?;
            // Exhaustive oracle: plain sequential sums, full sort.
            let mut all: Vec<(f64, usize)> = pool
                .iter_rows()
                .enumerate()
                .map(|(i, r)| {
                    let s: f64 = r
                        .iter()
                        .zip(&q)
                        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                        .sum();
                    (s.sqrt(), i)
                })
                .collect();
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let want: Vec<usize> = all[..k].iter().map(|p| p.1).collect();
            ensure(
                got.indices == want,
                format!("instance {inst}: index mismatch"),
            )?;
            for (g, w) in got.distances.iter().zip(&all[..k]) {
                worst = worst.max((g - w.0).abs());
            }
        }
    }
    ensure(worst <= 1e-6, format!("distance error {worst:e}"))?;
    within(t.elapsed(), Duration::from_secs(60))?;
    Ok(format!("200 queries, max distance error {worst:.1e}"))
}

// --- 4 ----------------------------------------------------------------------

/// In-pool LID recomputed from scratch: all pairwise distances, full sort.
fn pool_lid_oracle(points: &[Vec<f32>], k: usize) -> Vec<f64> {
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut d: Vec<f64> = points
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, q)| {
                    p.iter()
                        .zip(q)
                        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
                .collect();
            d.sort_by(f64::total_cmp);
            let d = &d[..k];
            let rk = d[k - 1].max(1e-12);
            let mean = d.iter().map(|r| (r.max(1e-12) / rk).ln()).sum::<f64>() / k as f64;
            if mean >= 0.0 {
                1e6
            } else {
                (-1.0 / mean).min(1e6)
            }
        })
        .collect()
}

fn subsets(n: usize, m: usize) -> Vec<Vec<usize>> {
    (0u32..1 << n)
        .filter(|s| s.count_ones() as usize == m)
        .map(|s| (0..n).filter(|i| s >> i & 1 == 1).collect())
        .collect()
}

fn coreset_optimality() -> Check {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut checked = 0;
    for inst in 0..50 {
        let classes = rng.random_range(1..=3);
        let dim = rng.random_range(1..=6);
        let m = rng.random_range(1..=4);
        let k = rng.random_range(2..=6);
        let mut records = Vec::new();
        for c in 0..classes {
            for _ in 0..rng.random_range(3..=12) {
                records.push(SuperpixelRecord {
                    superpixel: 0,
                    embedding: (0..dim)
                        .map(|_| rng.sample::<f32, _>(StandardNormal))
                        .collect(),
                    class_label: c,
                    purity: 1.0,
                    confidence: None,
                });
            }
        }
        let params = CoresetParams {
            m,
            k,
            ..CoresetParams::default()
        };
        let (coreset, report) =
            build_coreset_with_report(&[records.clone()], &params).map_err(|e| e.to_string())?;
        for (class, members) in &report.pools {
            let pts: Vec<Vec<f32>> = members
                .iter()
                .map(|&i| records[i].embedding.clone())
                .collect();
            let lids = pool_lid_oracle(&pts, k.min(pts.len() - 1));
            let m_eff = m.min(pts.len());
            let total = |s: &[usize]| -> f64 {
                let mut s = s.to_vec();
                s.sort_unstable();
                s.iter().map(|&i| lids[i]).sum()
            };
            let best = subsets(pts.len(), m_eff)
                .iter()
                .map(|s| total(s))
                .fold(f64::INFINITY, f64::min);
            let got = total(&report.selected[class]);
            ensure(
                got == best,
                format!("instance {inst} class {class}: {got} vs optimum {best}"),
            )?;
            checked += 1;
        }
        let weight_sum: f64 = coreset.weights().iter().map(|&w| w as f64).sum();
        ensure(weight_sum.is_finite(), "non-finite weights")?;
    }
    within(t.elapsed(), Duration::from_secs(60))?;
    Ok(format!("{checked} class pools optimal"))
}

// --- 5 ----------------------------------------------------------------------

fn aggregation_and_guidance() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let n = rng.random_range(1..=200);
        let mut labels: Vec<i32> = (0..64 * 64).map(|_| rng.random_range(0..n)).collect();
        for (i, l) in labels.iter_mut().take(n as usize).enumerate() {
            *l = i as i32;
        }
        let part =
            SuperpixelPartition::from_labels(64, 64, labels.clone()).map_err(|e| e.to_string())?;
        let conf: Vec<f32> = (0..64 * 64)
            .map(|_| rng.random_range(-20.0..20.0))
            .collect();
        let map = Tensor::from_f32(vec![64, 64], conf.clone()).map_err(|e| e.to_string())?;
        let got = aggregate_confidence(&map, &part).map_err(|e| e.to_string())?;
        let mut groups: HashMap<i32, Vec<f64>> = HashMap::new();
        for (&l, &c) in labels.iter().zip(&conf) {
            groups.entry(l).or_default().push(c as f64);
        }
        for (l, v) in groups {
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            worst = worst.max((got[l as usize] - mean).abs());
        }
    }
    ensure(worst <= 1e-6, format!("aggregation error {worst:e}"))?;

    let coreset = Coreset::new(
        2,
        1,
        CoresetStrategy::Lid,
        vec![0, 1],
        vec![2.0, 3.0],
        Matrix::from_rows(&[[1.0f32, 0.0], [0.0, 1.0]]).map_err(|e| e.to_string())?,
        None,
    )
    .map_err(|e| e.to_string())?;
    let q = Matrix::from_rows(&[[0.0f32, 0.0]]).map_err(|e| e.to_string())?;
    let d =
        guidance_score(&q, &coreset, GuidanceMethod::WeightedLid, 2).map_err(|e| e.to_string())?[0];
    ensure((d - 4.93261).abs() < 1e-4, format!("worked example {d}"))?;

    // Scaling pool and queries together leaves the weighted LID unchanged.
    let rows = 60;
    let emb: Vec<f32> = (0..rows * 8)
        .map(|_| rng.sample::<f32, _>(StandardNormal))
        .collect();
    let weights: Vec<f32> = (0..rows).map(|_| rng.random_range(1.0..20.0)).collect();
    let labels: Vec<u32> = (0..rows as u32).map(|i| i / 30).collect();
    let queries: Vec<f32> = (0..10 * 8)
        .map(|_| rng.sample::<f32, _>(StandardNormal))
        .collect();
    let score_at = |c: f32| -> Result<Vec<f64>, String> {
        let e: Vec<f32> = emb.iter().map(|x| x * c).collect();
        let cs = Coreset::new(
            2,
            10,
            CoresetStrategy::Lid,
            labels.clone(),
            weights.clone(),
            Matrix::new(rows, 8, e).map_err(|e| e.to_string())?,
            None,
        )
        .map_err(|e| e.to_string())?;
        let q: Vec<f32> = queries.iter().map(|x| x * c).collect();
        guidance_score(
            &Matrix::new(10, 8, q).map_err(|e| e.to_string())?,
            &cs,
            GuidanceMethod::WeightedLid,
            20,
        )
        .map_err(|e| e.to_string())
    };
    let base = score_at(1.0)?;
    let mut scale_err: f64 = 0.0;
    for c in [0.25f32, 2.0, 1024.0] {
        for (a, b) in score_at(c)?.iter().zip(&base) {
            scale_err = scale_err.max(rel(*a, *b));
        }
    }
    ensure(
        scale_err <= 1e-9,
        format!("scaling changed guidance by {scale_err:e}"),
    )?;
    Ok(format!(
        "aggregation err {worst:.1e}, worked example {d:.5}, scaling err {scale_err:.1e}"
    ))
}

// --- 6 ----------------------------------------------------------------------

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
    let v: Vec<u8> = (0..h * w * 3).map(|_| rng.random()).collect();
    Tensor::from_u8(vec![h, w, 3], v).unwrap()
}

fn structured_images() -> Vec<(&'static str, Tensor)> {
    let make = |h: usize, w: usize, f: &dyn Fn(usize, usize) -> [u8; 3]| {
        let mut v = Vec::with_capacity(h * w * 3);
        for r in 0..h {
            for c in 0..w {
                v.extend(f(r, c));
            }
        }
        Tensor::from_u8(vec![h, w, 3], v).unwrap()
    };
    vec![
        (
            "two halves",
            make(60, 80, &|_, c| {
                if c < 40 {
                    [220, 30, 30]
                } else {
                    [30, 30, 220]
                }
            }),
        ),
        ("uniform", make(50, 50, &|_, _| [128, 128, 128])),
        (
            "stripes",
            make(64, 64, &|r, _| {
                if (r / 8) % 2 == 0 {
                    [0, 0, 0]
                } else {
                    [255, 255, 255]
                }
            }),
        ),
        (
            "checkerboard",
            make(48, 72, &|r, c| {
                if (r / 6 + c / 6) % 2 == 0 {
                    [200, 200, 0]
                } else {
                    [0, 90, 200]
                }
            }),
        ),
        (
            "gradient",
            make(40, 90, &|r, c| {
                [(c * 255 / 89) as u8, (r * 255 / 39) as u8, 100]
            }),
        ),
    ]
}

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("thread pool")
        .install(f)
}

fn slic_invariants() -> Check {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut images: Vec<(String, Tensor)> = (0..20)
        .map(|i| {
            let h = rng.random_range(20..90);
            let w = rng.random_range(20..90);
            (format!("random {i}"), random_image(&mut rng, h, w))
        })
        .collect();
    images.extend(
        structured_images()
            .into_iter()
            .map(|(n, t)| (n.to_string(), t)),
    );
    let params = SlicParams {
        pixels_per_superpixel: 60,
        ..SlicParams::default()
    };
    for (name, img) in &images {
        let one = in_pool(1, || slic_segment(img, &params)).map_err(|e| format!("{name}: {e}"))?;
        let eight =
            in_pool(8, || slic_segment(img, &params)).map_err(|e| format!("{name}: {e}"))?;
        ensure(one == eight, format!("{name}: 1 vs 8 threads differ"))?;
        let (h, w) = (img.shape()[0], img.shape()[1]);
        ensure(one.labels().len() == h * w, format!("{name}: incomplete"))?;
        let n = one.num_superpixels();
        let mut seen = vec![false; n];
        for &l in one.labels() {
            ensure(
                l >= 0 && (l as usize) < n,
                format!("{name}: label {l} out of range"),
            )?;
            seen[l as usize] = true;
        }
        ensure(seen.iter().all(|&s| s), format!("{name}: labels not dense"))?;
        ensure(one.is_four_connected(), format!("{name}: not 4-connected"))?;
        if name == "two halves" {
            for r in 0..h {
                for c in 0..w {
                    let l = one.label_at(r, c);
                    let other_side = one
                        .labels()
                        .iter()
                        .enumerate()
                        .any(|(i, &m)| m as usize == l && ((i % w) < 40) != (c < 40));
                    ensure(
                        !other_side,
                        format!("superpixel {l} spans the color boundary"),
                    )?;
                }
            }
        }
    }
    within(t.elapsed(), Duration::from_secs(60))?;
    Ok(format!("{} images", images.len()))
}

// --- 7 ----------------------------------------------------------------------

/// Metrics recomputed per distinct threshold from scratch.
fn metrics_oracle(a: &[f64], l: &[bool]) -> (f64, f64, f64, f64) {
    let pos = l.iter().filter(|&&x| x).count() as f64;
    let neg = l.len() as f64 - pos;
    let mut pairs = 0.0;
    for (x, &lx) in a.iter().zip(l) {
        for (y, &ly) in a.iter().zip(l) {
            if lx && !ly {
                pairs += if x > y {
                    1.0
                } else if x == y {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    let mut ts = a.to_vec();
    ts.sort_by(|x, y| y.total_cmp(x));
    ts.dedup();
    let (mut ap, mut prev_recall, mut fpr95, mut f1): (f64, f64, Option<f64>, f64) =
        (0.0, 0.0, None, 0.0);
    for t in ts {
        let tp = a.iter().zip(l).filter(|(x, y)| **x >= t && **y).count() as f64;
        let fp = a.iter().zip(l).filter(|(x, y)| **x >= t && !**y).count() as f64;
        let (p, r) = (tp / (tp + fp), tp / pos);
        ap += (r - prev_recall) * p;
        prev_recall = r;
        if fpr95.is_none() && r >= 0.95 {
            fpr95 = Some(fp / neg);
        }
        if tp > 0.0 {
            f1 = f1.max(2.0 * p * r / (p + r));
        }
    }
    (pairs / (pos * neg), ap, fpr95.unwrap_or(1.0), f1)
}

fn metrics_oracle_check() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(2..=1000);
        let levels = rng.random_range(2..=2000);
        let a: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0..levels) as f64 / 10.0)
            .collect();
        let mut l: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        l[0] = true;
        l[1] = false;
        let r = evaluate_anomaly(&a, &l).map_err(|e| e.to_string())?;
        let (auroc, ap, fpr, f1) = metrics_oracle(&a, &l);
        for (x, y) in [
            (r.auroc, auroc),
            (r.aupr, ap),
            (r.fpr_at_95tpr, fpr),
            (r.best_f1, f1),
        ] {
            worst = worst.max((x - y).abs());
        }
    }
    ensure(worst <= 1e-9, format!("max deviation {worst:e}"))?;
    let r = evaluate_anomaly(&[0.8, 0.4, 0.6, 0.2], &[true, true, false, false])
        .map_err(|e| e.to_string())?;
    ensure(
        (r.auroc - 0.75).abs() < 1e-9,
        format!("worked AUROC {}", r.auroc),
    )?;
    ensure(
        (r.aupr - 0.8333).abs() < 1e-4,
        format!("worked AUPR {}", r.aupr),
    )?;
    ensure(
        r.fpr_at_95tpr == 0.5,
        format!("worked FPR@95 {}", r.fpr_at_95tpr),
    )?;
    Ok(format!(
        "max deviation {worst:.1e}; worked example {:.4}/{:.4}/{}",
        r.auroc, r.aupr, r.fpr_at_95tpr
    ))
}

// --- 8 ----------------------------------------------------------------------

struct Scene {
    inputs: ImageInputs,
    mask: suplid::tensorio::LabelMask,
}

fn auroc_of(
    coreset: &Coreset,
    cal: &suplid::scores::Calibration,
    test: &[Scene],
    conf: Option<ConfidenceMethod>,
    guid: GuidanceMethod,
    agg: Aggregation,
) -> Result<f64, String> {
    let mut cfg = ScoringConfig::default();
    cfg.fusion.confidence_method = conf;
    cfg.fusion.guidance_method = guid;
    cfg.aggregation = agg;
    let scorer = Scorer::new(coreset.clone(), cal.clone(), cfg).map_err(|e| e.to_string())?;
    let maps = test
        .iter()
        .map(|s| scorer.score(&s.inputs).map(|m| m.per_pixel))
        .collect::<suplid::Result<Vec<_>>>()
        .map_err(|e| e.to_string())?;
    let masks: Vec<_> = test.iter().map(|s| s.mask.clone()).collect();
    Ok(evaluate(&maps, &masks).map_err(|e| e.to_string())?.auroc)
}

fn complementarity() -> Check {
    let t = Instant::now();
    let mut lines = Vec::new();
    let mut failures = Vec::new();
    for kind in [OodKind::Far, OodKind::HighDim] {
        for seed in 0..6 {
            let spec = SynthSpec::new(4, 6, 64, 100.0, [256, 256], kind, seed);
            let world = SynthWorld::new(&spec).map_err(|e| e.to_string())?;
            let mut train = Vec::new();
            let mut test = Vec::new();
            for i in 0..12 {
                let s = world.scene(i).map_err(|e| e.to_string())?;
                let inputs = ImageInputs::new(s.image, s.features, s.logits.expect("K = 4"))
                    .map_err(|e| e.to_string())?;
                if i < 8 {
                    train.push((inputs, s.train_labels));
                } else {
                    test.push(Scene {
                        inputs,
                        mask: s.ood_mask,
                    });
                }
            }
            let config = Config::default();
            let analysis = analyze_training(&train, &config.slic()).map_err(|e| e.to_string())?;
            let mut coreset =
                build_coreset(&analysis.records, &config.coreset()).map_err(|e| e.to_string())?;
            coreset
                .set_templates(Some(analysis.templates))
                .map_err(|e| e.to_string())?;
            let cal = &analysis.calibration;
            let full = auroc_of(
                &coreset,
                cal,
                &test,
                Some(ConfidenceMethod::Energy),
                GuidanceMethod::WeightedLid,
                Aggregation::Superpixel,
            )?;
            match kind {
                OodKind::Far => {
                    let energy = auroc_of(
                        &coreset,
                        cal,
                        &test,
                        Some(ConfidenceMethod::Energy),
                        GuidanceMethod::None,
                        Aggregation::Pixel,
                    )?;
                    lines.push(format!("far/{seed}: full {full:.4} energy {energy:.4}"));
                    if !(full >= energy && full >= 0.95) {
                        failures.push(format!("far seed {seed}"));
                    }
                }
                _ => {
                    let ulid = auroc_of(
                        &coreset,
                        cal,
                        &test,
                        None,
                        GuidanceMethod::UnweightedLid,
                        Aggregation::Superpixel,
                    )?;
                    lines.push(format!(
                        "high_dim/{seed}: full {full:.4} unweighted-lid {ulid:.4}"
                    ));
                    if full < ulid {
                        failures.push(format!("high_dim seed {seed}"));
                    }
                }
            }
        }
    }
    for l in &lines {
        println!("    {l}");
    }
    ensure(
        failures.is_empty(),
        format!("failed: {}", failures.join(", ")),
    )?;
    within(t.elapsed(), Duration::from_secs(300))?;
    Ok("12 fixtures".into())
}

// --- 9 ----------------------------------------------------------------------

fn defaults_fidelity() -> Check {
    let c = Config::default();
    ensure(c.k == 400, format!("k = {}", c.k))?;
    ensure(c.m == 400, format!("m = {}", c.m))?;
    ensure(
        c.pixels_per_superpixel == 200,
        format!("pixels_per_superpixel = {}", c.pixels_per_superpixel),
    )?;
    ensure(REFERENCE_FEATURE_DIM == 304, "reference feature dimension")?;
    Ok("k=400 m=400 pixels_per_superpixel=200 D=304".into())
}

// --- 10 ---------------------------------------------------------------------

fn throughput() -> Check {
    let mut spec = SynthSpec::new(
        4,
        6,
        REFERENCE_FEATURE_DIM,
        100.0,
        [512, 1024],
        OodKind::Far,
        10,
    );
    spec.feature_stride = 8;
    let world = SynthWorld::new(&spec).map_err(|e| e.to_string())?;
    let scene = world.scene(0).map_err(|e| e.to_string())?;
    let inputs = ImageInputs::new(scene.image, scene.features, scene.logits.expect("K = 4"))
        .map_err(|e| e.to_string())?;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut weights = Vec::new();
    for c in 0..4 {
        let z = world.manifold_samples(c, 400).map_err(|e| e.to_string())?;
        let lids = batch_lid(&z, &z, &LidParams::with_k(399), true).map_err(|e| e.to_string())?;
        rows.extend_from_slice(z.as_slice());
        labels.extend(std::iter::repeat_n(c as u32, 400));
        weights.extend(lids.iter().map(|&l| l as f32));
    }
    let coreset = Coreset::new(
        4,
        399,
        CoresetStrategy::Lid,
        labels,
        weights,
        Matrix::new(1600, REFERENCE_FEATURE_DIM, rows).map_err(|e| e.to_string())?,
        None,
    )
    .map_err(|e| e.to_string())?;
    let scorer = Scorer::new(coreset, Default::default(), Config::default().scoring())
        .map_err(|e| e.to_string())?;
    let t = Instant::now();
    let map = in_pool(1, || scorer.score(&inputs)).map_err(|e| e.to_string())?;
    let elapsed = t.elapsed();
    ensure(map.per_pixel.shape() == [512, 1024], "output shape")?;
    within(elapsed, Duration::from_secs(2))?;
    Ok(format!(
        "1024x512, 4x400 coreset, k=400, 1 thread: {elapsed:.2?}"
    ))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Check); 10] = [
        ("estimator arithmetic", estimator_arithmetic),
        ("estimator consistency", estimator_consistency),
        ("kNN exactness", knn_exactness),
        ("coreset optimality", coreset_optimality),
        ("aggregation and guidance oracles", aggregation_and_guidance),
        ("SLIC invariants", slic_invariants),
        ("metrics oracle", metrics_oracle_check),
        ("end-to-end complementarity", complementarity),
        ("defaults fidelity", defaults_fidelity),
        ("throughput", throughput),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        match f() {
            Ok(detail) => println!("criterion {}: PASS {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {}: FAIL {name}: {why}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
