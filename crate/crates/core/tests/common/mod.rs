#![allow(dead_code)]

use std::path::Path;

use pipeline_core::config::PipelineConfig;
use pipeline_core::orchestrator::Pipeline;
use pipeline_core::raster::Raster;
use pipeline_core::store::AssetKind;

pub const PROMPT: &str = "Shoe on the floor on an urban street at sunset";

/// Textured shoe-like cut-out with a transparent surround.
pub fn shoe() -> Raster {
    let (w, h) = (200u32, 100u32);
    let mut r = Raster::filled(w, h, [0, 0, 0, 0]);
    for y in 0..h {
        for x in 0..w {
            let fx = x as f64 / w as f64;
            let fy = y as f64 / h as f64;
            // Sole along the bottom, upper tapering towards the toe.
            let inside = fy > 0.75 || (fy > 0.2 + 0.5 * fx && fx < 0.9) || (fy > 0.55 && fx < 0.98);
            if inside {
                let stripe = if (x / 8 + y / 8) % 2 == 0 { 40 } else { 0 };
                r.put_pixel(x, y, [150 + stripe, 40 + (x % 50) as u8, 30 + (y % 40) as u8 * 2, 255]);
            }
        }
    }
    r
}

pub fn background(base: [u8; 3]) -> Raster {
    let (w, h) = (320u32, 240u32);
    let mut r = Raster::filled(w, h, [0, 0, 0, 255]);
    for y in 0..h {
        for x in 0..w {
            let t = y as f64 / h as f64;
            let px = base.map(|c| (c as f64 * (0.6 + 0.4 * t)) as u8);
            r.put_pixel(x, y, [px[0], px[1], px[2], 255]);
        }
    }
    r
}

fn write_asset(dir: &Path, stem: &str, raster: &Raster, label: &str) {
    std::fs::create_dir_all(dir).unwrap();
    std::fs::write(dir.join(format!("{stem}.png")), raster.encode_png().unwrap()).unwrap();
    let sidecar = serde_json::json!({ "label": label, "category": "" });
    std::fs::write(dir.join(format!("{stem}.json")), sidecar.to_string()).unwrap();
}

/// Writes the product and background corpus under `root`.
pub fn write_corpus(root: &Path) {
    write_asset(&root.join("products"), "shoe", &shoe(), "shoe");
    write_asset(&root.join("backgrounds"), "street", &background([90, 100, 120]), "urban street");
    write_asset(&root.join("backgrounds"), "beach", &background([220, 200, 150]), "sandy beach");
}

/// Mock-backed pipeline rooted in `root`, with `extra` TOML appended to the
/// base document.
pub fn pipeline(root: &Path, extra: &str) -> Pipeline {
    let text = format!(
        "run_seed = 7\n[store]\npath = {:?}\n[output]\nruns_dir = {:?}\n{extra}",
        root.join("assets.cpst"),
        root.join("runs"),
    );
    let config = PipelineConfig::from_toml_str(&text).unwrap();
    let p = Pipeline::from_config(config).unwrap();
    if p.assets().is_empty() {
        write_corpus(&root.join("corpus"));
        let e = p.backends().embedder.as_ref();
        p.assets().ingest(&root.join("corpus/products"), AssetKind::Product, e).unwrap();
        p.assets().ingest(&root.join("corpus/backgrounds"), AssetKind::Background, e).unwrap();
    }
    p
}
