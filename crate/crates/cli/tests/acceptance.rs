//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::collections::{BTreeSet, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde_json::{json, Value};
use tower::ServiceExt;
use xverify_core::confidence::{compute_thresholds_cv, fit_sigmoid_points, RatioHistogram};
use xverify_core::imaging::FACE_SIZE;
use xverify_core::synthetic::paste_left_half;
use xverify_core::xmap::blend;
use xverify_core::{
    cosine_distance, explain_pair, occlude_sweep, synthetic_face, ConfidenceModel, DistanceSample, EmbeddingBackend,
    Image, Label, MethodKind, PairExplainContext, PatchSpec, ReferenceEmbedder, ScalarMap, SigmoidParams,
};
use xverify_store::synthetic::write_dataset;
use xverify_store::{load_pairs, run_batch, BatchConfig, PairLabel, PairStatus, ResultRecord, ResultsStore};

type Outcome = Result<String, String>;
type Criterion = (&'static str, u64, fn() -> Outcome);

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("occlusion counts", 5, occlusion_counts),
        ("zero-pair invariant", 30, zero_pair),
        ("cut-and-paste", 120, cut_and_paste),
        ("sigmoid fit recovery", 5, sigmoid_recovery),
        ("threshold CV oracle", 10, threshold_oracle),
        ("calibration", 60, calibration),
        ("blend luminance", 10, blend_luminance),
        ("dense-sweep equivalence", 300, dense_sweep),
        ("end-to-end batch + service", 600, end_to_end),
    ];
    let mut failed = 0;
    for (no, (name, budget, run)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let outcome = outcome.and_then(|detail| {
            if elapsed <= Duration::from_secs(budget) {
                Ok(detail)
            } else {
                Err(format!("{detail}; over the {budget} s budget"))
            }
        });
        let secs = elapsed.as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {}: PASS  {name} ({secs:.2} s) {detail}", no + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {}: FAIL  {name} ({secs:.2} s) {detail}", no + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

fn occlusion_counts() -> Outcome {
    let img = synthetic_face(1);
    for (p, want) in [(7, 441), (14, 361), (28, 256)] {
        let set = occlude_sweep(&img, &PatchSpec::new(p, 5)).map_err(|e| e.to_string())?;
        check(set.count() == want && set.occluded.len() == want, || {
            format!("p={p}: {} occlusions, want {want}", set.count())
        })?;
    }
    let mut combos = 0;
    for p in 1..=FACE_SIZE {
        for s in 1..=20 {
            // Positions per axis: steps of s that fit in the 112 − p slack.
            let mut per_axis = 0;
            let mut slack = FACE_SIZE - p;
            while slack >= s {
                slack -= s;
                per_axis += 1;
            }
            let mut oracle = Vec::new();
            for j in 0..per_axis {
                for i in 0..per_axis {
                    oracle.push((i * s, j * s));
                }
            }
            let spec = PatchSpec::new(p, s);
            check(spec.count() == per_axis * per_axis, || {
                format!("p={p} s={s}: N={} vs loop {}", spec.count(), per_axis * per_axis)
            })?;
            check(spec.positions().collect::<Vec<_>>() == oracle, || format!("p={p} s={s}: positions differ"))?;
            combos += 1;
        }
    }
    Ok(format!("441/361/256 exact, {combos} (p, s) combinations agree"))
}

fn zero_pair() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in [7, 19] {
        let img = synthetic_face(seed);
        let ctx = PairExplainContext::new(img.clone(), img, &ReferenceEmbedder, PatchSpec::default_sweep())
            .map_err(|e| e.to_string())?;
        check(ctx.d_orig == 0.0, || format!("d_orig {}", ctx.d_orig))?;
        let res = explain_pair(&ctx, MethodKind::III).map_err(|e| e.to_string())?;
        for scale in &res.per_scale {
            worst = worst.max(scale.maps[0].max_abs()).max(scale.maps[1].max_abs());
        }
        worst = worst.max(res.merged[0].max_abs());
        check(worst <= 1e-9, || format!("|S| reaches {worst:e}"))?;
        check(res.merged[0] == res.merged[1] && res.maps[0] == res.maps[1], || "maps differ".into())?;
        check(res.blended[0] == res.blended[1], || "blended maps differ".into())?;
    }
    Ok(format!("max |S| = {worst:e}, maps bit-identical"))
}

fn half_means(map: &ScalarMap) -> (f64, f64) {
    let (mut inside, mut outside) = (0.0, 0.0);
    for y in 0..FACE_SIZE {
        for x in 0..FACE_SIZE {
            if x < FACE_SIZE / 2 {
                inside += map.get(x, y);
            } else {
                outside += map.get(x, y);
            }
        }
    }
    let half = (FACE_SIZE * FACE_SIZE / 2) as f64;
    (inside / half, outside / half)
}

fn cut_and_paste() -> Outcome {
    let mut margins = Vec::new();
    for (a, b) in [(1, 2), (5, 9), (11, 12)] {
        let source = synthetic_face(a);
        let pasted = paste_left_half(&source, &synthetic_face(b));
        let ctx = PairExplainContext::new(source, pasted, &ReferenceEmbedder, PatchSpec::default_sweep())
            .map_err(|e| e.to_string())?;
        let res = explain_pair(&ctx, MethodKind::III).map_err(|e| e.to_string())?;
        let (inside, outside) = half_means(&res.merged[1]);
        check(inside > outside, || {
            format!("faces ({a},{b}): inside {inside:.3e} not above outside {outside:.3e}")
        })?;
        margins.push((inside - outside) / res.merged[1].max_abs());
    }
    let min = margins.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(format!("3 pairs, smallest inside-outside margin {:.1}% of peak |S|", 100.0 * min))
}

fn sigmoid_recovery() -> Outcome {
    let truth = SigmoidParams {
        amplitude: 1.0,
        midpoint: 0.3,
        steepness: -40.0,
        offset: 0.0,
    };
    let xs: Vec<f64> = (0..400).map(RatioHistogram::bin_center).collect();
    let clean: Vec<(f64, f64)> = xs.iter().map(|&d| (d, truth.eval(d))).collect();
    let fit = fit_sigmoid_points(&clean, 0.35).map_err(|e| e.to_string())?;
    let got = [fit.params.amplitude, fit.params.midpoint, fit.params.steepness, fit.params.offset];
    let want = [1.0, 0.3, -40.0, 0.0];
    let err = got.iter().zip(&want).map(|(g, w)| (g - w).abs()).fold(0.0, f64::max);
    check(err < 1e-6, || format!("noiseless parameter error {err:e}: {got:?}"))?;

    let mut worst_rmse: f64 = 0.0;
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noisy: Vec<(f64, f64)> = clean.iter().map(|&(d, y)| (d, y + rng.random_range(-0.01..=0.01))).collect();
        let fit = fit_sigmoid_points(&noisy, 0.35).map_err(|e| e.to_string())?;
        let rmse = (xs.iter().map(|&d| (fit.params.eval(d) - truth.eval(d)).powi(2)).sum::<f64>() / xs.len() as f64)
            .sqrt();
        worst_rmse = worst_rmse.max(rmse);
    }
    check(worst_rmse < 0.02, || format!("noisy RMSE {worst_rmse}"))?;
    Ok(format!("noiseless error {err:.1e}, worst noisy RMSE {worst_rmse:.4} over 10 seeds"))
}

/// Every candidate evaluated by direct counting; ties keep the smallest.
fn exhaustive_threshold(points: &[(f64, Label)]) -> (f64, usize) {
    let mut distinct: Vec<f64> = points.iter().map(|p| p.0).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut candidates = vec![distinct[0] - 1e-6];
    candidates.extend(distinct.windows(2).map(|w| (w[0] + w[1]) / 2.0));
    candidates.push(distinct[distinct.len() - 1] + 1e-6);
    let mut best = (f64::NAN, 0);
    for t in candidates {
        let correct = points
            .iter()
            .filter(|&&(d, l)| (d <= t) == (l == Label::Genuine))
            .count();
        if best.0.is_nan() || correct > best.1 {
            best = (t, correct);
        }
    }
    best
}

fn threshold_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut sets = 0;
    while sets < 20 {
        let n = rng.random_range(40..=500);
        let levels = rng.random_range(5..200);
        let samples: Vec<DistanceSample> = (0..n)
            .map(|i| {
                let genuine = rng.random_bool(0.5);
                let centre = if genuine { 0.4 } else { 0.7 };
                let d = (centre + rng.random_range(-0.4..0.4f64)).clamp(0.0, 2.0);
                let d = (d * levels as f64).round() / levels as f64;
                let fold = if i < 10 { i } else { rng.random_range(0..10) };
                let label = if genuine { Label::Genuine } else { Label::Imposter };
                DistanceSample::new(d, label, fold, i.to_string())
            })
            .collect();
        let Ok(choices) = compute_thresholds_cv(&samples) else { continue };
        for (fold, choice) in choices.iter().enumerate() {
            let points: Vec<(f64, Label)> = samples
                .iter()
                .filter(|s| s.fold != fold)
                .map(|s| (s.distance, s.label))
                .collect();
            let (t, correct) = exhaustive_threshold(&points);
            check(choice.threshold == t && choice.correct == correct, || {
                format!(
                    "set {sets} fold {fold}: got t={} ({} correct), scan t={t} ({correct} correct)",
                    choice.threshold, choice.correct
                )
            })?;
            let accuracy = correct as f64 / points.len() as f64;
            check(choice.accuracy == accuracy, || format!("set {sets} fold {fold}: accuracy differs"))?;
        }
        sets += 1;
    }
    Ok(format!("{sets} sets x 10 folds match the exhaustive scan"))
}

fn calibration() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let genuine = Normal::new(0.35, 0.1).unwrap();
    let imposter = Normal::new(0.65, 0.1).unwrap();
    let samples: Vec<DistanceSample> = (0..10_000)
        .map(|i| {
            let (dist, label) = if i % 2 == 0 { (&genuine, Label::Genuine) } else { (&imposter, Label::Imposter) };
            let d: f64 = dist.sample(&mut rng);
            DistanceSample::new(d.clamp(0.0, 2.0), label, (i / 2) % 10, i.to_string())
        })
        .collect();
    let model = ConfidenceModel::fit_folds(&samples).map_err(|e| e.to_string())?;
    let mut scored: Vec<(f64, bool)> = samples
        .iter()
        .map(|s| {
            let c = model.score(s.distance, Some(s.fold)).unwrap();
            (c.value, c.prediction == s.label)
        })
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut worst: f64 = 0.0;
    let mut rows = Vec::new();
    for (decile, chunk) in scored.chunks(scored.len() / 10).enumerate() {
        let mean_c = chunk.iter().map(|s| s.0).sum::<f64>() / chunk.len() as f64;
        let accuracy = chunk.iter().filter(|s| s.1).count() as f64 / chunk.len() as f64;
        let gap = (accuracy - mean_c).abs();
        worst = worst.max(gap);
        rows.push(format!("{decile}:{mean_c:.3}/{accuracy:.3}"));
        check(gap <= 0.05, || format!("decile {decile}: mean C {mean_c:.4}, correct {accuracy:.4}"))?;
    }
    Ok(format!("worst decile gap {worst:.4} [{}]", rows.join(" ")))
}

fn blend_luminance() -> Outcome {
    let lum = |p: [u8; 3]| (f64::from(*p.iter().max().unwrap()) + f64::from(*p.iter().min().unwrap())) / 510.0;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for round in 0..40 {
        let img = Image::from_fn(|_, _| [rng.random(), rng.random(), rng.random()]);
        let map = match round % 4 {
            0 => ScalarMap::constant(1.0),
            1 => ScalarMap::constant(-1.0),
            _ => ScalarMap::from_fn(|_, _| rng.random_range(-1.0..=1.0)),
        };
        let out = blend(&img, &map);
        for (a, b) in img.pixels().zip(out.pixels()) {
            worst = worst.max((lum(a) - lum(b)).abs());
        }
    }
    check(worst <= 2.0 / 255.0, || format!("luminance moved by {:.2}/255", worst * 255.0))?;
    Ok(format!("40 images, worst |dL| = {:.2}/255", worst * 255.0))
}

fn dense_sweep() -> Outcome {
    const P: usize = 28;
    let img1 = synthetic_face(31);
    let img2 = synthetic_face(32);
    let backend = ReferenceEmbedder;
    let ctx = PairExplainContext::new(img1.clone(), img2.clone(), &backend, vec![PatchSpec::new(P, 1)])
        .map_err(|e| e.to_string())?;
    let res = explain_pair(&ctx, MethodKind::III).map_err(|e| e.to_string())?;
    let got = &res.per_scale[0].maps[0];

    let per_axis = FACE_SIZE - P;
    let n = (per_axis * per_axis) as f64;
    let occlude = |img: &Image, x0: usize, y0: usize| {
        Image::from_fn(|x, y| {
            if (x0..x0 + P).contains(&x) && (y0..y0 + P).contains(&y) {
                [0, 0, 0]
            } else {
                img.pixel(x, y)
            }
        })
    };
    let embed = |img: &Image| backend.embed(img).unwrap();
    let d_orig = cosine_distance(&embed(&img1), &embed(&img2)).unwrap();
    let mut oracle = vec![0.0; FACE_SIZE * FACE_SIZE];
    for y0 in 0..per_axis {
        for x0 in 0..per_axis {
            let d = cosine_distance(&embed(&occlude(&img1, x0, y0)), &embed(&occlude(&img2, x0, y0))).unwrap();
            for y in y0..y0 + P {
                for x in x0..x0 + P {
                    oracle[y * FACE_SIZE + x] += (d - d_orig) / n;
                }
            }
        }
    }
    let err = got
        .values()
        .iter()
        .zip(&oracle)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    check(err <= 1e-12, || format!("max deviation {err:e}"))?;
    Ok(format!("{} occlusions, max deviation {err:.1e}", per_axis * per_axis))
}

struct Api {
    app: Router,
    rt: tokio::runtime::Runtime,
}

impl Api {
    fn send(&self, req: Request<Body>) -> (StatusCode, Vec<u8>) {
        self.rt.block_on(async {
            let resp = self.app.clone().oneshot(req).await.unwrap();
            let status = resp.status();
            (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
        })
    }

    fn get(&self, uri: &str) -> (StatusCode, Vec<u8>) {
        self.send(Request::get(uri).body(Body::empty()).unwrap())
    }

    fn json(&self, uri: &str) -> Value {
        let (status, body) = self.get(uri);
        assert_eq!(status, StatusCode::OK, "{uri}");
        serde_json::from_slice(&body).unwrap()
    }
}

fn ids(page: &Value) -> Vec<String> {
    page["items"]
        .as_array()
        .unwrap()
        .iter()
        .map(|i| i["pair_id"].as_str().unwrap().to_owned())
        .collect()
}

fn end_to_end() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let csv = write_dataset(dir.path(), "synth60", 60).map_err(|e| e.to_string())?;
    let pairs = load_pairs(&csv).map_err(|e| e.to_string())?;
    let root = dir.path().join("store");
    let config = BatchConfig::new("synth60");
    let first = run_batch(&pairs, &ReferenceEmbedder, &config, &root).map_err(|e| e.to_string())?;
    check(first.computed == 60 && first.failed == 0, || {
        format!("computed {}, failed {}", first.computed, first.failed)
    })?;
    check(first.confidence.is_some(), || format!("no confidence model: {:?}", first.confidence_note))?;
    let index_before = std::fs::read(&first.index_path).map_err(|e| e.to_string())?;
    let store = ResultsStore::open(&root).map_err(|e| e.to_string())?;
    let records = store.load_index("synth60", "reference").map_err(|e| e.to_string())?;
    check(records.len() == 60, || format!("{} records", records.len()))?;
    let mut artifacts = 0;
    for r in &records {
        check(r.status == PairStatus::Ok && r.c_score.is_some(), || format!("{} incomplete", r.pair_id))?;
        check(r.artifacts.len() == 2 + 3 * 4, || format!("{}: {} artifacts", r.pair_id, r.artifacts.len()))?;
        for a in &r.artifacts {
            check(store.artifact_path(r, a).is_file(), || format!("missing {}", a.path))?;
            artifacts += 1;
        }
    }

    let second = run_batch(&pairs, &ReferenceEmbedder, &config, &root).map_err(|e| e.to_string())?;
    check(second.computed == 0 && second.skipped == 60, || {
        format!("re-run computed {}, skipped {}", second.computed, second.skipped)
    })?;
    check(std::fs::read(&second.index_path).map_err(|e| e.to_string())? == index_before, || {
        "re-run changed the index".into()
    })?;

    let api = Api {
        app: xverify_service::app(xverify_service::ApiConfig::new(&root)).map_err(|e| e.to_string())?,
        rt: tokio::runtime::Runtime::new().map_err(|e| e.to_string())?,
    };
    service_contracts(&api, &store, &records)?;
    Ok(format!("60 records, {artifacts} artifacts, idempotent re-run, service contracts hold"))
}

fn service_contracts(api: &Api, store: &ResultsStore, records: &[ResultRecord]) -> Result<(), String> {
    let all: BTreeSet<String> = records.iter().map(|r| r.pair_id.clone()).collect();

    for (query, expected) in [
        ("", records.len()),
        ("label=genuine&", records.iter().filter(|r| r.label == PairLabel::Genuine).count()),
        ("correct=false&", records.iter().filter(|r| r.correct() == Some(false)).count()),
        ("sort=distance&order=desc&", records.len()),
    ] {
        let full = ids(&api.json(&format!("/api/pairs?{query}per_page=500")));
        let mut paged = Vec::new();
        for page in 1.. {
            let body = api.json(&format!("/api/pairs?{query}per_page=7&page={page}"));
            check(body["total"] == expected, || format!("{query}: total {}", body["total"]))?;
            let items = ids(&body);
            if items.is_empty() {
                break;
            }
            paged.extend(items);
        }
        check(paged == full && full.len() == expected, || format!("{query}: pages do not partition the result"))?;
        check(full.iter().all(|id| all.contains(id)), || format!("{query}: unknown ids"))?;
    }
    let genuine = api.json("/api/pairs?label=genuine&per_page=500");
    check(genuine["items"].as_array().unwrap().iter().all(|i| i["label"] == "genuine"), || {
        "label filter leaks".into()
    })?;
    let sorted = api.json("/api/pairs?sort=distance&per_page=500");
    let ds: Vec<f64> = sorted["items"].as_array().unwrap().iter().map(|i| i["d_orig"].as_f64().unwrap()).collect();
    check(ds.windows(2).all(|w| w[0] <= w[1]), || "distance sort is not monotone".into())?;

    let by_id: HashMap<&str, &ResultRecord> = records.iter().map(|r| (r.pair_id.as_str(), r)).collect();
    for r in records {
        let detail = api.json(&format!("/api/pairs/{}", r.pair_id));
        let echoed: ResultRecord = serde_json::from_value(detail.clone()).map_err(|e| e.to_string())?;
        check(&echoed == by_id[r.pair_id.as_str()], || format!("{}: detail differs from index", r.pair_id))?;
        let links = detail["artifact_urls"].as_array().unwrap();
        check(links.len() == r.artifacts.len(), || format!("{}: artifact links", r.pair_id))?;
        for (link, artifact) in links.iter().zip(&r.artifacts) {
            let (status, bytes) = api.get(link["url"].as_str().unwrap());
            let on_disk = std::fs::read(store.artifact_path(r, artifact)).map_err(|e| e.to_string())?;
            check(status == StatusCode::OK && bytes == on_disk, || format!("{}: {} differs", r.pair_id, artifact.path))?;
        }
    }

    let post = |id: &str, verdict: &str| {
        let body = json!({ "verdict": verdict, "operator": "acceptance", "note": format!("{id} {verdict}") });
        api.send(
            Request::post(format!("/api/pairs/{id}/decision"))
                .header(header::CONTENT_TYPE, "application/json")
                .body(Body::from(body.to_string()))
                .unwrap(),
        )
    };
    for id in ["pair_0000", "pair_0001", "pair_0042"] {
        let mut echoed = Vec::new();
        for verdict in ["unsure", "genuine"] {
            let (status, body) = post(id, verdict);
            check(status == StatusCode::CREATED, || format!("{id}: decision status {status}"))?;
            echoed.push(serde_json::from_slice::<Value>(&body).map_err(|e| e.to_string())?);
            let listed = api.json(&format!("/api/pairs/{id}/decisions"));
            check(listed["items"] == Value::Array(echoed.clone()), || format!("{id}: decision log differs"))?;
        }
    }
    let (status, _) = post("no_such_pair", "genuine");
    check(status == StatusCode::CONFLICT, || format!("unknown pair decision got {status}"))?;
    check(api.get("/api/pairs/no_such_pair").0 == StatusCode::NOT_FOUND, || "unknown pair not 404".into())?;
    check(api.get("/api/pairs?sort=bogus").0 == StatusCode::BAD_REQUEST, || "bad sort not 400".into())?;
    Ok(())
}
