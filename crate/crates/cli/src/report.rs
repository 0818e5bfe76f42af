use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::Args;
use serde_json::{json, Value};
use tcd_core::predict::{InstanceClass, InstanceObject};
use tcd_core::raster::mosaic::open_raster;
use tcd_core::stitch::canopy_cover;
use tcd_core::vector;
use tcd_core::{Error, Result};

use crate::predict::{read_roi, summary_path_for};
use crate::{write_json, Context, Outcome};

const HISTOGRAM_BINS: usize = 10;

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Directory holding predict outputs (mask.tif + summary.json and/or *.geojson).
    #[arg(long)]
    results: PathBuf,
    /// Restrict cover and counts to these polygons.
    #[arg(long)]
    roi: Option<PathBuf>,
    /// Report directory (defaults to --results).
    #[arg(long)]
    output: Option<PathBuf>,
}

fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(Error::Io)?;
    Ok(serde_json::from_str(&text)?)
}

fn histogram(scores: impl Iterator<Item = f64>) -> Vec<usize> {
    let mut bins = vec![0; HISTOGRAM_BINS];
    for s in scores {
        let b = ((s.clamp(0.0, 1.0) * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
        bins[b] += 1;
    }
    bins
}

fn failures(summary: &Value, source: &str) -> Vec<Value> {
    summary["tiles"]["failures"]
        .as_array()
        .map(|fs| {
            fs.iter()
                .map(|f| {
                    let mut f = f.clone();
                    f["source"] = json!(source);
                    f
                })
                .collect()
        })
        .unwrap_or_default()
}

pub fn run(a: ReportArgs, _ctx: &Context) -> Result<Outcome> {
    if !a.results.is_dir() {
        return Err(Error::invalid(format!("results directory {} does not exist", a.results.display())));
    }
    let mask_path = a.results.join("mask.tif");
    let semantic_summary_path = a.results.join("summary.json");
    let has_semantic = mask_path.exists();
    let mut geojsons: Vec<PathBuf> = std::fs::read_dir(&a.results)
        .map_err(Error::Io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "geojson"))
        .collect();
    geojsons.sort();
    if !has_semantic && geojsons.is_empty() {
        return Err(Error::invalid(format!(
            "no predict outputs (mask.tif or *.geojson) in {}",
            a.results.display()
        )));
    }

    let mut failed = Vec::new();
    let mut tiles = serde_json::Map::new();
    let mut cover = Value::Null;
    let mut crs = 0;
    if has_semantic {
        let mask = open_raster(&mask_path)?;
        crs = mask.info().geotransform.crs;
        let roi = a.roi.as_deref().map(|p| read_roi(p, crs)).transpose()?;
        cover = serde_json::to_value(canopy_cover(&*mask, roi.as_deref())?)?;
        if semantic_summary_path.exists() {
            let s = read_json(&semantic_summary_path)?;
            failed.extend(failures(&s, "semantic"));
            tiles.insert("semantic".into(), tile_counts(&s));
        }
    }

    let mut instances: Vec<InstanceObject> = Vec::new();
    for path in &geojsons {
        let fc = vector::read_geojson(path)?;
        let mut inst = fc.instances()?;
        if let Some(roi_path) = &a.roi {
            let roi = read_roi(roi_path, fc.epsg.unwrap_or(crs))?;
            inst = vector::filter_by_roi(inst, &roi);
        }
        instances.extend(inst);
        let sp = summary_path_for(path);
        if sp.exists() {
            let s = read_json(&sp)?;
            let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            failed.extend(failures(&s, &name));
            tiles.insert(name, tile_counts(&s));
        }
    }
    let has_instances = !geojsons.is_empty();
    let by_class = |c: InstanceClass| instances.iter().filter(move |i| i.class == c);
    let (tree_count, canopy_count, histograms) = if has_instances {
        (
            json!(by_class(InstanceClass::Tree).count()),
            json!(by_class(InstanceClass::Canopy).count()),
            json!({
                "bin_width": 1.0 / HISTOGRAM_BINS as f64,
                "tree": histogram(by_class(InstanceClass::Tree).map(|i| i.score)),
                "canopy": histogram(by_class(InstanceClass::Canopy).map(|i| i.score)),
            }),
        )
    } else {
        (Value::Null, Value::Null, Value::Null)
    };

    let report = json!({
        "results": a.results.display().to_string(),
        "roi": a.roi.as_ref().map(|p| p.display().to_string()),
        "cover": cover,
        "cover_fraction": cover.get("fraction").cloned().unwrap_or(Value::Null),
        "instance_files": geojsons.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        "tree_count": tree_count,
        "canopy_count": canopy_count,
        "score_histograms": histograms,
        "tiles": tiles,
        "failed_tiles": failed,
    });

    let dir = a.output.clone().unwrap_or_else(|| a.results.clone());
    std::fs::create_dir_all(&dir).map_err(Error::Io)?;
    let json_path = dir.join("report.json");
    let text_path = dir.join("report.txt");
    write_json(&json_path, &report)?;
    std::fs::write(&text_path, text_summary(&report)).map_err(Error::Io)?;
    let mut out = Outcome::default();
    out.output("report", &json_path);
    out.output("text", &text_path);
    Ok(out)
}

fn tile_counts(summary: &Value) -> Value {
    let t = &summary["tiles"];
    json!({
        "total": t["tiles_total"],
        "processed": t["tiles_processed"],
        "skipped": t["tiles_skipped"],
        "failed": t["tiles_failed"],
    })
}

fn text_summary(r: &Value) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "results: {}", r["results"].as_str().unwrap_or(""));
    if let Some(roi) = r["roi"].as_str() {
        let _ = writeln!(s, "roi: {roi}");
    }
    match r["cover"].as_object() {
        Some(c) => {
            let _ = writeln!(
                s,
                "canopy cover: {:.2}% ({} of {} pixels)",
                c["fraction"].as_f64().unwrap_or(0.0) * 100.0,
                c["canopy_pixels"],
                c["total_pixels"]
            );
        }
        None => {
            let _ = writeln!(s, "canopy cover: n/a");
        }
    }
    if r["tree_count"].is_null() {
        let _ = writeln!(s, "instances: n/a");
    } else {
        let _ = writeln!(s, "trees: {}", r["tree_count"]);
        let _ = writeln!(s, "canopy regions: {}", r["canopy_count"]);
    }
    if let Some(tiles) = r["tiles"].as_object() {
        for (name, t) in tiles {
            let _ = writeln!(
                s,
                "tiles [{name}]: {} total, {} processed, {} skipped, {} failed",
                t["total"], t["processed"], t["skipped"], t["failed"]
            );
        }
    }
    let failed = r["failed_tiles"].as_array().map_or(0, Vec::len);
    if failed > 0 {
        let _ = writeln!(s, "failed tiles:");
        for f in r["failed_tiles"].as_array().into_iter().flatten() {
            let _ = writeln!(s, "  [{}] col {} row {}: {}", f["source"].as_str().unwrap_or(""), f["col"], f["row"], f["error"].as_str().unwrap_or(""));
        }
    }
    s
}
