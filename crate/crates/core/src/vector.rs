//! GeoJSON instance files.
//!
//! The writer streams one feature at a time and keeps the closing `]}` on disk after
//! every feature, so a file cut short by a crash still parses up to the last whole
//! feature. A legacy top-level `"crs"` member carries the EPSG code.

use std::fs::File;
use std::io::Write;
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};

use geo::{Centroid, Contains, Coord, Geometry, LineString, MultiPolygon, Point, Polygon};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::predict::{InstanceClass, InstanceObject};

const TAIL: &[u8] = b"\n]}\n";

pub fn crs_urn(epsg: u32) -> String {
    format!("urn:ogc:def:crs:EPSG::{epsg}")
}

/// EPSG code from `urn:ogc:def:crs:EPSG::<code>` or `EPSG:<code>`.
pub fn parse_crs_name(name: &str) -> Option<u32> {
    let upper = name.to_ascii_uppercase();
    let pos = upper.rfind("EPSG:")?;
    upper[pos + 5..].trim_start_matches(':').trim().parse().ok()
}

fn ring_json(ring: &LineString<f64>) -> Value {
    Value::Array(ring.coords().map(|c| json!([c.x, c.y])).collect())
}

pub fn polygon_json(p: &Polygon<f64>) -> Value {
    let rings: Vec<Value> = std::iter::once(p.exterior()).chain(p.interiors()).map(ring_json).collect();
    json!({"type": "Polygon", "coordinates": rings})
}

pub fn instance_feature(inst: &InstanceObject) -> Value {
    json!({
        "type": "Feature",
        "properties": {"class": inst.class.as_str(), "score": inst.score},
        "geometry": polygon_json(&inst.geometry),
    })
}

/// Streaming FeatureCollection writer.
pub struct GeoJsonWriter {
    file: File,
    path: PathBuf,
    tail_at: u64,
    count: usize,
}

impl GeoJsonWriter {
    pub fn create(path: impl AsRef<Path>, epsg: Option<u32>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut file = File::create(&path).map_err(|e| Error::file(&path, e))?;
        let mut head = String::from("{\"type\":\"FeatureCollection\",");
        if let Some(code) = epsg.filter(|&c| c != 0) {
            head.push_str(&format!(
                "\"crs\":{{\"type\":\"name\",\"properties\":{{\"name\":\"{}\"}}}},",
                crs_urn(code)
            ));
        }
        head.push_str("\"features\":[");
        file.write_all(head.as_bytes()).map_err(|e| Error::file(&path, e))?;
        file.write_all(TAIL).map_err(|e| Error::file(&path, e))?;
        Ok(GeoJsonWriter {
            file,
            tail_at: head.len() as u64,
            path,
            count: 0,
        })
    }

    pub fn write_feature(&mut self, feature: &Value) -> Result<()> {
        let mut buf = Vec::with_capacity(256);
        buf.extend_from_slice(if self.count == 0 { b"\n" } else { b",\n" });
        serde_json::to_writer(&mut buf, feature)?;
        let body = buf.len() as u64;
        buf.extend_from_slice(TAIL);
        self.file
            .write_all_at(&buf, self.tail_at)
            .map_err(|e| Error::file(&self.path, e))?;
        self.tail_at += body;
        self.count += 1;
        Ok(())
    }

    pub fn write(&mut self, inst: &InstanceObject) -> Result<()> {
        self.write_feature(&instance_feature(inst))
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn finish(self) -> Result<usize> {
        self.file.sync_all().map_err(|e| Error::file(&self.path, e))?;
        Ok(self.count)
    }
}

pub fn write_instances(path: impl AsRef<Path>, epsg: Option<u32>, instances: &[InstanceObject]) -> Result<usize> {
    let mut w = GeoJsonWriter::create(path, epsg)?;
    for inst in instances {
        w.write(inst)?;
    }
    w.finish()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Feature {
    pub geometry: Geometry<f64>,
    pub properties: Map<String, Value>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct FeatureCollection {
    pub epsg: Option<u32>,
    pub features: Vec<Feature>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Invalid(format!("GeoJSON: {}", msg.into()))
}

fn parse_position(v: &Value) -> Result<Coord<f64>> {
    let a = v.as_array().ok_or_else(|| bad("position is not an array"))?;
    match (a.first().and_then(Value::as_f64), a.get(1).and_then(Value::as_f64)) {
        (Some(x), Some(y)) => Ok(Coord { x, y }),
        _ => Err(bad("position needs two numbers")),
    }
}

fn parse_ring(v: &Value) -> Result<LineString<f64>> {
    let pts = v.as_array().ok_or_else(|| bad("ring is not an array"))?;
    let coords = pts.iter().map(parse_position).collect::<Result<Vec<_>>>()?;
    Ok(LineString::new(coords))
}

fn parse_polygon(v: &Value) -> Result<Polygon<f64>> {
    let rings = v.as_array().ok_or_else(|| bad("polygon coordinates are not an array"))?;
    let mut rings = rings.iter().map(parse_ring).collect::<Result<Vec<_>>>()?.into_iter();
    let ext = rings.next().ok_or_else(|| bad("polygon without rings"))?;
    Ok(Polygon::new(ext, rings.collect()))
}

pub fn parse_geometry(v: &Value) -> Result<Geometry<f64>> {
    let kind = v.get("type").and_then(Value::as_str).ok_or_else(|| bad("geometry without type"))?;
    let coords = v.get("coordinates").ok_or_else(|| bad("geometry without coordinates"));
    Ok(match kind {
        "Point" => Geometry::Point(Point(parse_position(coords?)?)),
        "Polygon" => Geometry::Polygon(parse_polygon(coords?)?),
        "MultiPolygon" => {
            let parts = coords?.as_array().ok_or_else(|| bad("multipolygon is not an array"))?;
            Geometry::MultiPolygon(MultiPolygon::new(parts.iter().map(parse_polygon).collect::<Result<_>>()?))
        }
        "MultiPoint" => {
            let pts = coords?.as_array().ok_or_else(|| bad("multipoint is not an array"))?;
            Geometry::MultiPoint(pts.iter().map(|p| parse_position(p).map(Point)).collect::<Result<Vec<_>>>()?.into())
        }
        other => return Err(bad(format!("unsupported geometry type {other}"))),
    })
}

pub fn parse_feature_collection(doc: &Value) -> Result<FeatureCollection> {
    let epsg = doc
        .pointer("/crs/properties/name")
        .and_then(Value::as_str)
        .and_then(parse_crs_name);
    let features = match doc.get("type").and_then(Value::as_str) {
        Some("FeatureCollection") => doc
            .get("features")
            .and_then(Value::as_array)
            .ok_or_else(|| bad("FeatureCollection without features"))?
            .iter()
            .map(parse_feature)
            .collect::<Result<Vec<_>>>()?,
        Some("Feature") => vec![parse_feature(doc)?],
        Some(_) => vec![Feature {
            geometry: parse_geometry(doc)?,
            properties: Map::new(),
        }],
        None => return Err(bad("document without type")),
    };
    Ok(FeatureCollection { epsg, features })
}

fn parse_feature(f: &Value) -> Result<Feature> {
    let geometry = parse_geometry(f.get("geometry").ok_or_else(|| bad("feature without geometry"))?)?;
    let properties = f.get("properties").and_then(Value::as_object).cloned().unwrap_or_default();
    Ok(Feature { geometry, properties })
}

pub fn read_geojson(path: impl AsRef<Path>) -> Result<FeatureCollection> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    let doc: Value = serde_json::from_slice(&bytes).map_err(|e| bad(format!("{}: {e}", path.display())))?;
    parse_feature_collection(&doc)
}

fn polygons_of(g: &Geometry<f64>) -> Vec<Polygon<f64>> {
    match g {
        Geometry::Polygon(p) => vec![p.clone()],
        Geometry::MultiPolygon(mp) => mp.0.clone(),
        _ => Vec::new(),
    }
}

impl FeatureCollection {
    /// All polygon parts, regardless of properties.
    pub fn polygons(&self) -> Vec<Polygon<f64>> {
        self.features.iter().flat_map(|f| polygons_of(&f.geometry)).collect()
    }

    /// Point features, plus centroids of polygon features.
    pub fn points(&self) -> Vec<Point<f64>> {
        let mut out = Vec::new();
        for f in &self.features {
            match &f.geometry {
                Geometry::Point(p) => out.push(*p),
                Geometry::MultiPoint(mp) => out.extend(mp.0.iter().copied()),
                g => out.extend(polygons_of(g).iter().filter_map(|p| p.centroid())),
            }
        }
        out
    }

    /// Polygon features as instances. Missing `class` defaults to tree and missing
    /// `score` to 1; multipolygons become one instance per part.
    pub fn instances(&self) -> Result<Vec<InstanceObject>> {
        let mut out = Vec::new();
        for f in &self.features {
            let class = match f.properties.get("class").and_then(Value::as_str) {
                None => InstanceClass::Tree,
                Some(c) => InstanceClass::parse(&c.to_ascii_lowercase()).ok_or_else(|| bad(format!("unknown class {c:?}")))?,
            };
            let score = f.properties.get("score").and_then(Value::as_f64).unwrap_or(1.0);
            for geometry in polygons_of(&f.geometry) {
                out.push(InstanceObject { class, score, geometry });
            }
        }
        Ok(out)
    }
}

/// Keeps instances whose centroid lies inside any ROI polygon.
pub fn filter_by_roi(instances: Vec<InstanceObject>, roi: &[Polygon<f64>]) -> Vec<InstanceObject> {
    instances
        .into_iter()
        .filter(|i| i.geometry.centroid().is_some_and(|c| roi.iter().any(|r| r.contains(&c))))
        .collect()
}

/// Keeps points inside (or on the boundary of) any ROI polygon.
pub fn filter_points_by_roi(points: Vec<Point<f64>>, roi: &[Polygon<f64>]) -> Vec<Point<f64>> {
    points
        .into_iter()
        .filter(|p| roi.iter().any(|r| crate::geom::contains_inclusive(r, *p)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom;

    fn inst(i: usize) -> InstanceObject {
        InstanceObject {
            class: if i % 3 == 0 { InstanceClass::Canopy } else { InstanceClass::Tree },
            score: (i % 100) as f64 / 100.0,
            geometry: geom::normalize(&geom::rect_polygon(i as f64, 0.5, i as f64 + 0.75, 2.0)),
        }
    }

    #[test]
    fn empty_collection_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.geojson");
        assert_eq!(write_instances(&p, Some(3395), &[]).unwrap(), 0);
        let fc = read_geojson(&p).unwrap();
        assert_eq!(fc.epsg, Some(3395));
        assert!(fc.features.is_empty());
    }

    #[test]
    fn round_trip_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("two.geojson");
        let mut items = vec![inst(1), inst(3)];
        items[0].geometry = Polygon::new(
            items[0].geometry.exterior().clone(),
            vec![LineString::from(vec![(1.1, 1.0), (1.1, 1.5), (1.6, 1.5), (1.6, 1.0), (1.1, 1.0)])],
        );
        write_instances(&p, Some(4326), &items).unwrap();
        let fc = read_geojson(&p).unwrap();
        assert_eq!(fc.instances().unwrap(), items);
        let raw: Value = serde_json::from_slice(&std::fs::read(&p).unwrap()).unwrap();
        let props = raw["features"][1]["properties"].as_object().unwrap();
        assert_eq!(props.keys().collect::<Vec<_>>(), vec!["class", "score"]);
        assert_eq!(props["class"], "canopy");
    }

    #[test]
    fn valid_after_every_feature() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("partial.geojson");
        let mut w = GeoJsonWriter::create(&p, None).unwrap();
        for i in 0..5 {
            w.write(&inst(i)).unwrap();
            let fc = read_geojson(&p).unwrap();
            assert_eq!(fc.features.len(), i + 1);
        }
        // Simulated crash: the writer is dropped without finish().
        drop(w);
        assert_eq!(read_geojson(&p).unwrap().features.len(), 5);
    }

    #[test]
    fn many_features() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("many.geojson");
        let items: Vec<_> = (0..100_000).map(inst).collect();
        assert_eq!(write_instances(&p, Some(3395), &items).unwrap(), 100_000);
        assert_eq!(read_geojson(&p).unwrap().features.len(), 100_000);
    }

    #[test]
    fn crs_names() {
        assert_eq!(parse_crs_name("urn:ogc:def:crs:EPSG::3395"), Some(3395));
        assert_eq!(parse_crs_name("EPSG:4326"), Some(4326));
        assert_eq!(parse_crs_name("OGC:CRS84"), None);
    }

    #[test]
    fn points_and_roi() {
        let doc = json!({"type": "FeatureCollection", "features": [
            {"type": "Feature", "properties": {}, "geometry": {"type": "Point", "coordinates": [1.0, 2.0]}},
            {"type": "Feature", "properties": null, "geometry": {"type": "MultiPoint", "coordinates": [[3.0, 4.0], [5.0, 6.0]]}}
        ]});
        let fc = parse_feature_collection(&doc).unwrap();
        assert_eq!(fc.points().len(), 3);
        let roi = vec![geom::rect_polygon(0.0, 0.0, 3.0, 3.0)];
        let kept = filter_by_roi((0..6).map(inst).collect(), &roi);
        assert_eq!(kept.len(), 3);
    }
}
