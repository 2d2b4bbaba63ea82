//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

mod common;

use std::path::PathBuf;
use std::time::{Duration, Instant};

use pipeline_core::backend::mock::MockEmbedder;
use pipeline_core::backend::{Embedder, EmbeddingVector};
use pipeline_core::decompose::MarketingBrief;
use pipeline_core::composition::{enumerate_variants, rotated_size, Canvas, PlanConfig, ScaleFactors, Slot};
use pipeline_core::evaluation::{ms_ssim, paired_t_test};
use pipeline_core::manifest::RunStatus;
use pipeline_core::orchestrator::{evaluate_run, MAX_ATTEMPTS};
use pipeline_core::quality::{
    clip_score, gate, rank_and_select, select_by_patterns, Pattern, QualityReport, RubricScore, SelectionMode,
    SelectionPolicy, DEFAULT_PATTERNS,
};
use pipeline_core::raster::Raster;
use pipeline_core::store::{asset_embedding, Asset, AssetKind, AssetStore, DEFAULT_PRODUCT_THRESHOLD};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde_json::Value;

type Check = std::result::Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn all_patterns() -> Vec<Pattern> {
    (0..16u8)
        .map(|b| [(b >> 3) & 1, (b >> 2) & 1, (b >> 1) & 1, b & 1])
        .collect()
}

/// Priority of a pattern under the relaxation list; lower is better.
fn priority(p: &Pattern, patterns: &[Pattern]) -> Option<usize> {
    patterns.iter().position(|q| q == p)
}

fn pattern_oracle(scores: &[Pattern], patterns: &[Pattern]) -> Vec<usize> {
    let best = scores.iter().filter_map(|s| priority(s, patterns)).min();
    match best {
        None => Vec::new(),
        Some(b) => (0..scores.len()).filter(|&i| priority(&scores[i], patterns) == Some(b)).collect(),
    }
}

fn pattern_selection() -> Check {
    let all = all_patterns();
    let mut lists = 0usize;
    let mut stack: Vec<Vec<Pattern>> = vec![Vec::new()];
    while let Some(list) = stack.pop() {
        lists += 1;
        let got = select_by_patterns(&list, &DEFAULT_PATTERNS);
        let want = pattern_oracle(&list, &DEFAULT_PATTERNS);
        ensure!(got == want, "{list:?}: got {got:?}, want {want:?}");
        if list.len() < 4 {
            for p in &all {
                let mut next = list.clone();
                next.push(*p);
                stack.push(next);
            }
        }
    }
    ensure!(lists == 1 + 16 + 256 + 4096 + 65536, "enumerated {lists} lists");
    Ok(format!("{lists} lists of length ≤4 match the oracle"))
}

fn gate_check() -> Check {
    for p in all_patterns() {
        let r = RubricScore::from_pattern(p).map_err(|e| e.to_string())?;
        let want = u8::from(p == [1, 1, 1, 1]);
        ensure!(gate(&r) == want, "{p:?}: gate {}", gate(&r));
        ensure!(r.pattern() == p, "{p:?} does not round-trip");
    }
    Ok("16 patterns: gate is 1 only for all-pass".into())
}

fn random_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn clip_check() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let dim = rng.random_range(2..=128);
        let (a, b) = (random_vec(&mut rng, dim), random_vec(&mut rng, dim));
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        let want = 2.5 * (dot / (na * nb)).max(0.0);
        let ea = EmbeddingVector::new(a.clone(), "t").map_err(|e| e.to_string())?;
        let eb = EmbeddingVector::new(b.clone(), "t").map_err(|e| e.to_string())?;
        let got = clip_score(&ea, &eb, 2.5).map_err(|e| e.to_string())?;
        ensure!((0.0..=2.5).contains(&got), "out of range: {got}");
        worst = worst.max((got - want).abs());
        ensure!((got - want).abs() <= 1e-9, "got {got}, want {want}");
        let (ka, kb) = (rng.random_range(1e-3..1e3), rng.random_range(1e-3..1e3));
        let sa = EmbeddingVector::new(a.iter().map(|x| x * ka).collect(), "t").map_err(|e| e.to_string())?;
        let sb = EmbeddingVector::new(b.iter().map(|x| x * kb).collect(), "t").map_err(|e| e.to_string())?;
        let scaled = clip_score(&sa, &sb, 2.5).map_err(|e| e.to_string())?;
        ensure!((scaled - got).abs() <= 1e-9, "scaling changed {got} to {scaled}");
    }
    Ok(format!("1000 pairs, max |error| {worst:.1e} (tol 1e-9), in [0, 2.5], scale invariant"))
}

fn random_policy(rng: &mut ChaCha8Rng) -> SelectionPolicy {
    let mut p = SelectionPolicy::default();
    if rng.random_bool(0.3) {
        p.mode = SelectionMode::StrictGate;
    }
    if rng.random_bool(0.3) {
        p.use_clip_filter = true;
    }
    p.k = rng.random_range(1..=6);
    p
}

fn random_reports(rng: &mut ChaCha8Rng, policy: &SelectionPolicy) -> Vec<QualityReport> {
    let all = all_patterns();
    let n = rng.random_range(0..=14);
    (0..n)
        .map(|i| {
            // Biased towards passing patterns so selections are non-trivial.
            let p = if rng.random_bool(0.5) {
                DEFAULT_PATTERNS[rng.random_range(0..3)]
            } else {
                all[rng.random_range(0..16)]
            };
            // Coarse grid so ties occur.
            let aes = rng.random_range(0..=20) as f64 / 2.0;
            let clip = rng.random_range(0..=10) as f64 / 4.0;
            QualityReport::new(format!("c{i:02}"), RubricScore::from_pattern(p).unwrap(), aes, clip, policy)
        })
        .collect()
}

fn ranking_oracle(reports: &[QualityReport], policy: &SelectionPolicy) -> Vec<String> {
    let patterns: Vec<Pattern> = match policy.mode {
        SelectionMode::StrictGate => vec![[1, 1, 1, 1]],
        SelectionMode::Hierarchical => policy.patterns.clone(),
    };
    let scores: Vec<Pattern> = reports.iter().map(|r| r.rubric.pattern()).collect();
    let mut pool: Vec<(f64, String)> = pattern_oracle(&scores, &patterns)
        .into_iter()
        .map(|i| &reports[i])
        .filter(|r| r.aesthetic >= policy.aesthetic_threshold)
        .filter(|r| !policy.use_clip_filter || r.clip_score >= policy.clip_threshold)
        .map(|r| (policy.alpha * r.aesthetic / 10.0 + policy.beta * r.clip_score / 2.5, r.candidate_id.clone()))
        .collect();
    let mut out = Vec::new();
    while out.len() < policy.k && !pool.is_empty() {
        let mut best = 0;
        for i in 1..pool.len() {
            let (s, id) = &pool[i];
            let (bs, bid) = &pool[best];
            if s > bs || (s == bs && id < bid) {
                best = i;
            }
        }
        out.push(pool.remove(best).1);
    }
    out
}

fn ranking_check() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut nonempty = 0;
    for set in 0..200 {
        let policy = random_policy(&mut rng);
        let reports = random_reports(&mut rng, &policy);
        let got = rank_and_select(&reports, &policy);
        let want = ranking_oracle(&reports, &policy);
        ensure!(got == want, "set {set}: got {got:?}, want {want:?}");
        nonempty += usize::from(!got.is_empty());

        let mut shuffled = reports.clone();
        shuffled.shuffle(&mut rng);
        ensure!(rank_and_select(&shuffled, &policy) == got, "set {set}: order dependent");

        if let Some(pick) = got.first().cloned() {
            let mut raised = reports.clone();
            let r = raised.iter_mut().find(|r| r.candidate_id == pick).unwrap();
            *r = QualityReport::new(pick.clone(), r.rubric, (r.aesthetic + 1.0).min(10.0), r.clip_score, &policy);
            ensure!(
                rank_and_select(&raised, &policy).first() == Some(&pick),
                "set {set}: raising the top aesthetic demoted {pick}"
            );
        }
        for (i, id) in got.iter().enumerate() {
            let mut raised = reports.clone();
            let r = raised.iter_mut().find(|r| &r.candidate_id == id).unwrap();
            *r = QualityReport::new(id.clone(), r.rubric, (r.aesthetic + 0.5).min(10.0), r.clip_score, &policy);
            let after = rank_and_select(&raised, &policy);
            let pos = after.iter().position(|x| x == id);
            ensure!(pos.is_some_and(|p| p <= i), "set {set}: raising {id} moved it from {i} to {pos:?}");
        }
    }
    Ok(format!("200 sets ({nonempty} non-empty) match brute force; permutation invariant; aesthetic monotone"))
}

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn load_fixture(name: &str) -> Raster {
    Raster::decode(&std::fs::read(fixtures().join("ms_ssim").join(name)).unwrap()).unwrap()
}

fn ms_ssim_check() -> Check {
    let text = std::fs::read_to_string(fixtures().join("ms_ssim/reference.json")).map_err(|e| e.to_string())?;
    let reference: Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    let pairs = reference["pairs"].as_array().ok_or("no pairs")?;
    ensure!(pairs.len() == 10, "{} fixture pairs", pairs.len());
    let mut worst = 0.0f64;
    for pair in pairs {
        let a = load_fixture(pair["a"].as_str().unwrap());
        let b = load_fixture(pair["b"].as_str().unwrap());
        let own = ms_ssim(&a, &a).map_err(|e| e.to_string())?;
        ensure!((own - 1.0).abs() <= 1e-6, "self-similarity {own}");
        let want = pair["ms_ssim"].as_f64().unwrap();
        let got = ms_ssim(&a, &b).map_err(|e| e.to_string())?;
        worst = worst.max((got - want).abs());
        ensure!((got - want).abs() <= 1e-4, "{}: got {got}, want {want}", pair["a"]);
    }
    let base = load_fixture("pair03_a.png");
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut scores = vec![1.0];
    for sigma in [5.0, 15.0, 30.0] {
        let noise = Normal::new(0.0, sigma).unwrap();
        let mut noisy = base.clone();
        for px in noisy.data_mut().chunks_exact_mut(4) {
            for c in &mut px[..3] {
                *c = (*c as f64 + noise.sample(&mut rng)).round().clamp(0.0, 255.0) as u8;
            }
        }
        let s = ms_ssim(&base, &noisy).map_err(|e| e.to_string())?;
        ensure!(s < *scores.last().unwrap(), "sigma {sigma}: {s} is not below {}", scores.last().unwrap());
        scores.push(s);
    }
    Ok(format!(
        "10 fixtures max |error| {worst:.1e} (tol 1e-4); self 1±1e-6; noise σ=5,15,30 → {:.4}, {:.4}, {:.4}",
        scores[1], scores[2], scores[3]
    ))
}

/// Output pixels whose centres fall inside the `w × h` rectangle turned
/// counterclockwise (as displayed) by `deg`, found by forward-mapping its
/// corners and testing against the resulting polygon.
fn rotation_oracle(w: u32, h: u32, deg: u32, ow: u32, oh: u32) -> Vec<bool> {
    let t = (deg as f64).to_radians();
    let (c, s) = (t.cos(), t.sin());
    let (hw, hh) = (w as f64 / 2.0, h as f64 / 2.0);
    // A displayed counterclockwise turn on a y-down grid.
    let corners: Vec<(f64, f64)> = [(-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh)]
        .iter()
        .map(|&(x, y)| (x * c + y * s + ow as f64 / 2.0, -x * s + y * c + oh as f64 / 2.0))
        .collect();
    let mut out = vec![false; (ow * oh) as usize];
    for y in 0..oh {
        for x in 0..ow {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let signs: Vec<f64> = (0..4)
                .map(|i| {
                    let (ax, ay) = corners[i];
                    let (bx, by) = corners[(i + 1) % 4];
                    (bx - ax) * (py - ay) - (by - ay) * (px - ax)
                })
                .collect();
            out[(y * ow + x) as usize] = signs.iter().all(|v| *v >= 0.0) || signs.iter().all(|v| *v <= 0.0);
        }
    }
    out
}

fn composition_check() -> Check {
    ensure!(rotated_size(200, 100, 15) == (220, 149), "rotated_size {:?}", rotated_size(200, 100, 15));
    let t = 15f64.to_radians();
    let exact = ((200.0 * t.cos() + 100.0 * t.sin()).ceil(), (200.0 * t.sin() + 100.0 * t.cos()).ceil());
    ensure!(exact == (220.0, 149.0), "geometry oracle {exact:?}");

    let mut raster = Raster::filled(200, 100, [0, 0, 0, 255]);
    for y in 0..100 {
        for x in 0..200 {
            raster.put_pixel(x, y, [(x % 256) as u8, (y * 2) as u8, 120, 255]);
        }
    }
    let product = Asset {
        asset_id: "box".into(),
        kind: AssetKind::Product,
        embedding: asset_embedding(&MockEmbedder::default(), &raster, "box").map_err(|e| e.to_string())?,
        raster,
        label: "box".into(),
        category: String::new(),
    };
    let defaults = PlanConfig::default();
    let default_canvas = Canvas::empty(defaults.canvas_width, defaults.canvas_height).map_err(|e| e.to_string())?;
    let advised = ScaleFactors::new(0.3, 0.3).map_err(|e| e.to_string())?;
    let default_plan = enumerate_variants(&default_canvas, &product, advised, &defaults).map_err(|e| e.to_string())?;
    ensure!(default_plan.variants.len() == 9, "default config gave {} variants", default_plan.variants.len());
    for v in &default_plan.variants {
        let b = v.placed_bbox;
        ensure!(b.fits_within(defaults.canvas_width, defaults.canvas_height), "{}: bbox {b:?}", v.variant_id);
        ensure!(v.mask.bounds().is_some_and(|m| b.x <= m.x && m.right() <= b.right() && b.y <= m.y && m.bottom() <= b.bottom()), "{}: mask outside bbox", v.variant_id);
    }

    let canvas = Canvas::empty(1000, 1000).map_err(|e| e.to_string())?;
    let config = PlanConfig {
        canvas_width: 1000,
        canvas_height: 1000,
        ..PlanConfig::default()
    };
    let scale = ScaleFactors::new(0.2, 0.1).map_err(|e| e.to_string())?;
    let plan = enumerate_variants(&canvas, &product, scale, &config).map_err(|e| e.to_string())?;
    ensure!(plan.variants.len() == 9, "{} variants", plan.variants.len());
    let mut ids: Vec<&str> = plan.variants.iter().map(|v| v.variant_id.as_str()).collect();
    ids.sort();
    ids.dedup();
    ensure!(ids.len() == 9, "duplicate variant ids");
    let mut worst_disagreement = 0.0f64;
    for v in &plan.variants {
        let b = v.placed_bbox;
        ensure!(b.fits_within(1000, 1000), "{}: bbox {b:?} leaves the canvas", v.variant_id);
        ensure!(v.mask.dimensions() == (1000, 1000), "{}: mask size", v.variant_id);
        ensure!(v.composed.dimensions() == (1000, 1000), "{}: composed size", v.variant_id);
        let want = if v.rotation_deg == 0 { (200, 100) } else { (220, 149) };
        ensure!((b.width, b.height) == want, "{}: bbox {}x{}", v.variant_id, b.width, b.height);
        let mut inside = 0;
        for y in 0..1000 {
            for x in 0..1000 {
                if v.mask.get(x, y) {
                    ensure!(b.contains(x, y), "{}: mask pixel ({x},{y}) outside bbox", v.variant_id);
                    inside += 1;
                }
            }
        }
        let oracle = rotation_oracle(200, 100, v.rotation_deg, b.width, b.height);
        let mut differ = 0usize;
        for y in 0..b.height {
            for x in 0..b.width {
                if v.mask.get(b.x + x, b.y + y) != oracle[(y * b.width + x) as usize] {
                    differ += 1;
                }
            }
        }
        let rate = differ as f64 / inside.max(1) as f64;
        worst_disagreement = worst_disagreement.max(rate);
        ensure!(rate <= 0.01, "{}: mask differs from rotation oracle on {differ} pixels", v.variant_id);
        let centre = Slot::center_fraction(v.position_slot) * 1000.0;
        let mid = b.x as f64 + b.width as f64 / 2.0;
        ensure!((mid - centre).abs() <= 1.0, "{}: centred at {mid}, slot {centre}", v.variant_id);
    }
    Ok(format!(
        "9 variants inside canvas; 15° box 220x149; masks vs rotation oracle ≤{:.2}% boundary disagreement (tol 1%)",
        worst_disagreement * 100.0
    ))
}

fn retrieval_check() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("assets.cpst");
    let embedder = MockEmbedder::default();
    let (tag, dim) = (embedder.model_tag().to_string(), embedder.dimension());
    let store = AssetStore::open(&path, &tag, dim).map_err(|e| e.to_string())?;
    let brief = MarketingBrief {
        primary_product: "desk lamp".into(),
        background_elements: String::new(),
        theme: String::new(),
        source_prompt: "desk lamp".into(),
        warnings: Vec::new(),
    };
    let query = embedder.embed_text(&brief.primary_product).map_err(|e| e.to_string())?.values().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut assets = Vec::new();
    for i in 0..1000 {
        // Mix of the query and noise so similarities span the threshold.
        let w = rng.random_range(0.0..1.5);
        let v: Vec<f64> = random_vec(&mut rng, dim)
            .iter()
            .zip(&query)
            .map(|(n, q)| 0.15 * n + w * q)
            .collect();
        let kind = if i % 10 == 0 { AssetKind::Background } else { AssetKind::Product };
        assets.push(Asset {
            asset_id: format!("a{i:04}"),
            kind,
            raster: Raster::filled(1, 1, [255, 255, 255, 255]),
            embedding: EmbeddingVector::new(v, tag.as_str()).map_err(|e| e.to_string())?,
            label: format!("asset {i}"),
            category: String::new(),
        });
    }
    // Independent full scan over the f32 values the store keeps.
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
    };
    let mut scan: Vec<(f64, String)> = assets
        .iter()
        .filter(|a| a.kind == AssetKind::Product)
        .map(|a| {
            let v: Vec<f64> = a.embedding.values().iter().map(|x| *x as f32 as f64).collect();
            (cos(&v, &query), a.asset_id.clone())
        })
        .filter(|(s, _)| *s >= 0.39)
        .collect();
    scan.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));

    store.insert_all(assets).map_err(|e| e.to_string())?;
    let retrieve = |s: &AssetStore, limit: usize| {
        s.retrieve_products(&brief, limit, DEFAULT_PRODUCT_THRESHOLD, &embedder)
            .map_err(|e| e.to_string())
    };
    let hits = retrieve(&store, 1000)?;
    ensure!(!scan.is_empty() && scan.len() < 900, "threshold not exercised: {} hits", scan.len());
    ensure!(hits.len() == scan.len(), "{} hits, full scan {}", hits.len(), scan.len());
    for (h, (s, id)) in hits.iter().zip(&scan) {
        ensure!(&h.asset.asset_id == id, "order differs at {id}");
        ensure!((h.similarity - s).abs() <= 1e-9, "{id}: {} vs {s}", h.similarity);
        ensure!(h.similarity >= 0.39, "{id} below threshold");
    }
    let top5 = retrieve(&store, 5)?;
    ensure!(top5.len() == 5.min(hits.len()), "limit returned {}", top5.len());
    ensure!(top5.iter().zip(&hits).all(|(a, b)| a.asset.asset_id == b.asset.asset_id), "limit changes order");

    let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
    drop(store);
    let reopened = AssetStore::open_existing(&path).map_err(|e| e.to_string())?;
    ensure!(reopened.len() == 1000, "reopened {} assets", reopened.len());
    ensure!(reopened.to_bytes().map_err(|e| e.to_string())? == bytes, "reopened store re-encodes differently");
    let again = retrieve(&reopened, 1000)?;
    ensure!(
        again.iter().map(|h| (&h.asset.asset_id, h.similarity)).eq(hits.iter().map(|h| (&h.asset.asset_id, h.similarity))),
        "reopened store ranks differently"
    );
    drop(reopened);
    ensure!(std::fs::read(&path).map_err(|e| e.to_string())? == bytes, "reopen modified the file");
    Ok(format!("1000 embeddings, {} hits ≥0.39 equal full scan; reopen byte-identical", hits.len()))
}

fn t_test_check() -> Check {
    let text = std::fs::read_to_string(fixtures().join("paired_t_test.json")).map_err(|e| e.to_string())?;
    let f: Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    let col = |k: &str| -> Vec<f64> { f[k].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect() };
    let (base, treat) = (col("baseline"), col("treatment"));
    let r = paired_t_test(&base, &treat).map_err(|e| e.to_string())?;
    ensure!(r.n == 10 && (r.t_statistic - 2.2622).abs() <= 1e-4, "n = {}, t = {}", r.n, r.t_statistic);
    ensure!((r.p_value - 0.05).abs() <= 1e-3, "p = {}", r.p_value);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        let n = rng.random_range(2..30);
        let a: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let ab = paired_t_test(&a, &b).map_err(|e| e.to_string())?;
        let ba = paired_t_test(&b, &a).map_err(|e| e.to_string())?;
        ensure!(ab.t_statistic == -ba.t_statistic, "t not antisymmetric: {} vs {}", ab.t_statistic, ba.t_statistic);
        ensure!(ab.p_value == ba.p_value, "p differs: {} vs {}", ab.p_value, ba.p_value);
    }
    Ok(format!(
        "fixture t = {:.4}, p = {:.6} (0.0500±1e-3); antisymmetric on 100 random samples",
        r.t_statistic, r.p_value
    ))
}

fn end_to_end_check() -> Check {
    let (a, b, c) = (
        tempfile::tempdir().map_err(|e| e.to_string())?,
        tempfile::tempdir().map_err(|e| e.to_string())?,
        tempfile::tempdir().map_err(|e| e.to_string())?,
    );
    let p1 = common::pipeline(a.path(), "");
    let m1 = p1.run(common::PROMPT).map_err(|e| e.to_string())?;
    let m2 = common::pipeline(b.path(), "").run(common::PROMPT).map_err(|e| e.to_string())?;
    ensure!(m1.status == RunStatus::Completed, "status {:?}: {:?}", m1.status, m1.failures);
    let (j1, j2) = (m1.canonical_json().map_err(|e| e.to_string())?, m2.canonical_json().map_err(|e| e.to_string())?);
    ensure!(j1 == j2, "canonical manifests differ");
    p1.runs().verify(&m1.run_id).map_err(|e| e.to_string())?;

    let faithful = evaluate_run(p1.runs(), &m1, p1.backends().embedder.as_ref()).map_err(|e| e.to_string())?;
    ensure!((faithful.pipeline.ms_ssim - 1.0).abs() <= 1e-6, "faithful ms_ssim {}", faithful.pipeline.ms_ssim);

    let p3 = common::pipeline(c.path(), "[backend.generate]\nkind = \"mock\"\nperturb_product = 0.1\n");
    let m3 = p3.run(common::PROMPT).map_err(|e| e.to_string())?;
    let degraded = evaluate_run(p3.runs(), &m3, p3.backends().embedder.as_ref()).map_err(|e| e.to_string())?;
    ensure!(
        degraded.baseline.ms_ssim < faithful.baseline.ms_ssim,
        "degraded {} not below faithful {}",
        degraded.baseline.ms_ssim,
        faithful.baseline.ms_ssim
    );
    Ok(format!(
        "two runs byte-identical ({} bytes); faithful ms_ssim {:.7}; degraded {:.4}",
        j1.len(),
        faithful.pipeline.ms_ssim,
        degraded.baseline.ms_ssim
    ))
}

fn fallback_check() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let small = "[plan]\ncanvas_width = 512\ncanvas_height = 512\n";
    let rejecting = format!("{small}[backend.llm]\nkind = \"mock\"\nvalidator = \"reject_all\"\n");
    let p = common::pipeline(&dir.path().join("reject"), &rejecting);
    let m = p.run(common::PROMPT).map_err(|e| e.to_string())?;
    ensure!(m.status == RunStatus::Completed, "rejected backgrounds: status {:?}", m.status);
    ensure!(!m.retrieval.backgrounds.is_empty(), "no backgrounds were judged");
    let canvas = m.canvas.as_ref().ok_or("no canvas")?;
    ensure!(
        canvas.background_source == pipeline_core::composition::BackgroundSource::Empty,
        "canvas {:?}",
        canvas.background_source
    );

    let failing = format!("{small}[backend.generate]\nkind = \"mock\"\nforced_notes = [\"duplicate\"]\n");
    let p = common::pipeline(&dir.path().join("fail"), &failing);
    let m = p.run(common::PROMPT).map_err(|e| e.to_string())?;
    ensure!(m.status == RunStatus::CompletedEmpty, "all failing: status {:?}", m.status);
    ensure!(m.attempts == MAX_ATTEMPTS && MAX_ATTEMPTS == 2, "{} attempts", m.attempts);
    let passes: Vec<u32> = m.candidates.iter().map(|c| c.attempt).collect();
    ensure!(passes.iter().filter(|a| **a == 2).count() == 9, "second pass size");
    ensure!(m.selected.is_empty(), "selected {:?}", m.selected);
    p.runs().verify(&m.run_id).map_err(|e| e.to_string())?;
    ensure!(p.runs().load(&m.run_id).map_err(|e| e.to_string())? == m, "manifest does not reload");
    Ok("rejected backgrounds → empty canvas; all rejected → 1 regeneration then empty selection".into())
}

fn main() {
    let checks: [(&str, u64, fn() -> Check); 10] = [
        ("pattern-selection", 1_000, pattern_selection),
        ("gate", 1_000, gate_check),
        ("clip-score", 1_000, clip_check),
        ("ranking", 5_000, ranking_check),
        ("ms-ssim", 30_000, ms_ssim_check),
        ("composition", 5_000, composition_check),
        ("retrieval", 5_000, retrieval_check),
        ("paired-t-test", 1_000, t_test_check),
        ("end-to-end", 60_000, end_to_end_check),
        ("fallback", 60_000, fallback_check),
    ];
    let mut failed = 0;
    for (name, budget_ms, check) in checks {
        let start = Instant::now();
        let outcome = check();
        let elapsed = start.elapsed();
        let over = elapsed > Duration::from_millis(budget_ms);
        let line = match &outcome {
            Ok(detail) if !over => format!("PASS {name}: {detail}"),
            Ok(detail) => format!("FAIL {name}: over time budget; {detail}"),
            Err(e) => format!("FAIL {name}: {e}"),
        };
        if outcome.is_err() || over {
            failed += 1;
        }
        println!("{line} [{} ms, budget {budget_ms} ms]", elapsed.as_millis());
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
