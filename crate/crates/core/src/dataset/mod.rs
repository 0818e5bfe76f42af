//! Dataset tooling: biome tagging, license-aware splits, COCO export, rasterization.

pub mod coco;

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;

use geo::{Area, Polygon};
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geom;
use crate::vector;

pub const DEFAULT_FOLDS: usize = 5;
pub const DEFAULT_HOLDOUT_FRAC: f64 = 0.10;
pub const DEFAULT_SEED: u64 = 42;
pub const UNMATCHED_BIOME: i32 = -1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum License {
    #[serde(rename = "CC-BY")]
    CcBy,
    #[serde(rename = "CC-BY-NC")]
    CcByNc,
    #[serde(rename = "CC-BY-SA")]
    CcBySa,
}

impl License {
    /// Accepts spellings such as `CC-BY-SA`, `cc by-sa 4.0` or `CC_BY_NC`.
    pub fn parse(s: &str) -> Option<Self> {
        let norm: String = s
            .to_ascii_uppercase()
            .chars()
            .map(|c| if c == ' ' || c == '_' { '-' } else { c })
            .collect();
        let parts: Vec<&str> = norm.split('-').filter(|p| !p.is_empty()).collect();
        if parts.len() < 2 || parts[0] != "CC" || parts[1] != "BY" {
            return None;
        }
        let rest: Vec<&str> = parts[2..].iter().copied().filter(|p| !p.contains('.') && !p.chars().all(|c| c.is_ascii_digit())).collect();
        match rest.as_slice() {
            [] => Some(License::CcBy),
            ["NC"] => Some(License::CcByNc),
            ["SA"] => Some(License::CcBySa),
            _ => None,
        }
    }
}

impl<'de> Deserialize<'de> for License {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        License::parse(&s).ok_or_else(|| serde::de::Error::custom(format!("unsupported license {s:?}")))
    }
}

fn de_footprint<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<Polygon<f64>>, D::Error> {
    let v = Option::<Value>::deserialize(d)?;
    match v {
        None | Some(Value::Null) => Ok(None),
        Some(v) => {
            let g = vector::parse_geometry(&v).map_err(serde::de::Error::custom)?;
            match g {
                geo::Geometry::Polygon(p) => Ok(Some(p)),
                geo::Geometry::MultiPolygon(mp) => Ok(geom::largest_part(mp)),
                _ => Err(serde::de::Error::custom("footprint must be a polygon")),
            }
        }
    }
}

/// One source orthomosaic and the tiles cut from it (one JSON line each).
#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct SourceImageRecord {
    pub oam_id: String,
    pub license: License,
    #[serde(default)]
    pub biome: Option<i32>,
    pub tile_ids: Vec<u64>,
    #[serde(default, deserialize_with = "de_footprint")]
    pub footprint: Option<Polygon<f64>>,
    #[serde(default)]
    pub metadata_url: String,
}

impl SourceImageRecord {
    pub fn tiles(&self) -> usize {
        self.tile_ids.len()
    }

    fn biome_or_unmatched(&self) -> i32 {
        self.biome.unwrap_or(UNMATCHED_BIOME)
    }
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<SourceImageRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::file(path, e))?;
    let mut out = Vec::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::file(path, e))?;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let rec: SourceImageRecord = serde_json::from_str(t)
            .map_err(|e| Error::invalid(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// Biome polygons from GeoJSON features carrying an integer `biome` property.
pub fn read_biomes(path: impl AsRef<Path>) -> Result<Vec<(i32, Polygon<f64>)>> {
    let fc = vector::read_geojson(path)?;
    let mut out = Vec::new();
    for f in &fc.features {
        let id = f
            .properties
            .get("biome")
            .and_then(Value::as_i64)
            .ok_or_else(|| Error::invalid("biome feature without integer \"biome\" property"))?;
        let polys = match &f.geometry {
            geo::Geometry::Polygon(p) => vec![p.clone()],
            geo::Geometry::MultiPolygon(mp) => mp.0.clone(),
            _ => Vec::new(),
        };
        out.extend(polys.into_iter().map(|p| (id as i32, p)));
    }
    Ok(out)
}

/// Biome with the largest intersection area with `footprint`, or −1 when none touches it.
/// Ties go to the smaller id.
pub fn assign_biome(footprint: &Polygon<f64>, biomes: &[(i32, Polygon<f64>)]) -> i32 {
    let mut area: BTreeMap<i32, f64> = BTreeMap::new();
    for (id, poly) in biomes {
        let a = geom::intersection_area(footprint, poly);
        if a > 0.0 {
            *area.entry(*id).or_default() += a;
        }
    }
    area.into_iter()
        .fold(None::<(i32, f64)>, |best, (id, a)| match best {
            Some((_, b)) if b >= a => best,
            _ => Some((id, a)),
        })
        .map_or(UNMATCHED_BIOME, |(id, _)| id)
}

/// Fills in missing biome ids from footprints.
pub fn tag_biomes(records: &mut [SourceImageRecord], biomes: &[(i32, Polygon<f64>)]) {
    for r in records.iter_mut() {
        if r.biome.is_none() {
            r.biome = Some(match &r.footprint {
                Some(fp) if fp.unsigned_area() > 0.0 => assign_biome(fp, biomes),
                _ => UNMATCHED_BIOME,
            });
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "split", rename_all = "lowercase")]
pub enum Assignment {
    Holdout,
    Train { fold: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub sources: usize,
    pub tiles: usize,
    pub holdout_sources: usize,
    pub holdout_tiles: usize,
    pub fold_sources: Vec<usize>,
    pub fold_tiles: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitResult {
    pub k: usize,
    pub holdout_frac: f64,
    pub seed: u64,
    /// Per source id.
    pub sources: BTreeMap<String, Assignment>,
    /// Per tile id, inherited from the source.
    pub tiles: BTreeMap<u64, Assignment>,
    pub summary: SplitSummary,
}

impl SplitResult {
    pub fn to_json(&self) -> Result<String> {
        // Round-trip through Value so every object comes out with sorted keys.
        let v = serde_json::to_value(self)?;
        Ok(serde_json::to_string_pretty(&v)? + "\n")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

fn deal_key(seed: u64, oam_id: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(oam_id.as_bytes());
    h.finalize().into()
}

/// License-aware, biome-stratified holdout and k-fold assignment of whole sources.
pub fn make_splits(records: &[SourceImageRecord], k: usize, holdout_frac: f64, seed: u64) -> Result<SplitResult> {
    if k < 2 {
        return Err(Error::invalid("k must be at least 2"));
    }
    if !(holdout_frac > 0.0 && holdout_frac < 1.0) {
        return Err(Error::invalid("holdout fraction must be in (0, 1)"));
    }
    if records.len() < k {
        return Err(Error::invalid(format!("{} sources cannot fill {k} folds", records.len())));
    }
    let mut seen = std::collections::HashSet::new();
    let mut tile_owner = std::collections::HashMap::new();
    for r in records {
        if !seen.insert(r.oam_id.as_str()) {
            return Err(Error::invalid(format!("duplicate source {:?}", r.oam_id)));
        }
        for t in &r.tile_ids {
            if let Some(prev) = tile_owner.insert(*t, r.oam_id.as_str()) {
                return Err(Error::invalid(format!("tile {t} listed under both {prev:?} and {:?}", r.oam_id)));
            }
        }
    }

    let mut by_biome: BTreeMap<i32, Vec<&SourceImageRecord>> = BTreeMap::new();
    for r in records {
        by_biome.entry(r.biome_or_unmatched()).or_default().push(r);
    }
    let mut assign: BTreeMap<String, Assignment> = BTreeMap::new();
    let mut train_by_biome: Vec<Vec<&SourceImageRecord>> = Vec::new();
    for members in by_biome.values_mut() {
        members.sort_by_key(|r| (deal_key(seed, &r.oam_id), r.oam_id.clone()));
        let biome_tiles: usize = members.iter().map(|r| r.tiles()).sum();
        let target = holdout_frac * biome_tiles as f64;
        let mut held: usize = 0;
        for r in members.iter().filter(|r| r.license == License::CcBySa) {
            assign.insert(r.oam_id.clone(), Assignment::Holdout);
            held += r.tiles();
        }
        let mut train = Vec::new();
        let mut filling = true;
        for r in members.iter().filter(|r| r.license != License::CcBySa) {
            // Take the next source while that lands closer to the target than stopping.
            if filling && (held as f64) + (r.tiles() as f64) / 2.0 < target {
                assign.insert(r.oam_id.clone(), Assignment::Holdout);
                held += r.tiles();
            } else {
                filling = false;
                train.push(*r);
            }
        }
        train_by_biome.push(train);
    }
    let n_train: usize = train_by_biome.iter().map(Vec::len).sum();
    if n_train < k {
        return Err(Error::invalid(format!("only {n_train} training sources for {k} folds")));
    }
    let mut next_fold = 0;
    for train in train_by_biome {
        for r in train {
            assign.insert(r.oam_id.clone(), Assignment::Train { fold: next_fold });
            next_fold = (next_fold + 1) % k;
        }
    }

    let mut tiles = BTreeMap::new();
    let mut summary = SplitSummary {
        sources: records.len(),
        tiles: 0,
        holdout_sources: 0,
        holdout_tiles: 0,
        fold_sources: vec![0; k],
        fold_tiles: vec![0; k],
    };
    for r in records {
        let a = assign[&r.oam_id];
        summary.tiles += r.tiles();
        match a {
            Assignment::Holdout => {
                summary.holdout_sources += 1;
                summary.holdout_tiles += r.tiles();
            }
            Assignment::Train { fold } => {
                summary.fold_sources[fold] += 1;
                summary.fold_tiles[fold] += r.tiles();
            }
        }
        for t in &r.tile_ids {
            tiles.insert(*t, a);
        }
    }
    Ok(SplitResult {
        k,
        holdout_frac,
        seed,
        sources: assign,
        tiles,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(id: &str, license: License, biome: i32, tiles: std::ops::Range<u64>) -> SourceImageRecord {
        SourceImageRecord {
            oam_id: id.into(),
            license,
            biome: Some(biome),
            tile_ids: tiles.collect(),
            footprint: None,
            metadata_url: String::new(),
        }
    }

    #[test]
    fn license_spellings() {
        assert_eq!(License::parse("CC-BY-SA"), Some(License::CcBySa));
        assert_eq!(License::parse("cc by-sa 4.0"), Some(License::CcBySa));
        assert_eq!(License::parse("CC_BY_NC"), Some(License::CcByNc));
        assert_eq!(License::parse("CC BY 4.0"), Some(License::CcBy));
        assert_eq!(License::parse("MIT"), None);
    }

    #[test]
    fn record_parsing() {
        let line = r#"{"oam_id":"a1","license":"CC BY 4.0","tile_ids":[1,2],"footprint":{"type":"Polygon","coordinates":[[[0,0],[1,0],[1,1],[0,1],[0,0]]]},"metadata_url":"u"}"#;
        let r: SourceImageRecord = serde_json::from_str(line).unwrap();
        assert_eq!(r.license, License::CcBy);
        assert_eq!(r.biome, None);
        assert_eq!(r.footprint.unwrap().unsigned_area(), 1.0);
    }

    #[test]
    fn biome_by_largest_overlap() {
        let biomes = vec![
            (1, geom::rect_polygon(0.0, 0.0, 10.0, 10.0)),
            (4, geom::rect_polygon(10.0, 0.0, 20.0, 10.0)),
        ];
        assert_eq!(assign_biome(&geom::rect_polygon(12.0, 2.0, 14.0, 4.0), &biomes), 4);
        assert_eq!(assign_biome(&geom::rect_polygon(50.0, 50.0, 51.0, 51.0), &biomes), UNMATCHED_BIOME);
        assert_eq!(assign_biome(&geom::rect_polygon(4.0, 0.0, 14.0, 1.0), &biomes), 1);
    }

    #[test]
    fn even_deal_without_holdout() {
        let records: Vec<_> = (0..10).map(|i| rec(&format!("s{i}"), License::CcBy, 3, i * 4..i * 4 + 4)).collect();
        let s = make_splits(&records, 5, 1e-9, 42).unwrap();
        assert_eq!(s.summary.holdout_sources, 0);
        assert_eq!(s.summary.fold_sources, vec![2; 5]);
    }

    #[test]
    fn too_few_sources() {
        let records: Vec<_> = (0..3).map(|i| rec(&format!("s{i}"), License::CcBy, 3, i..i + 1)).collect();
        assert!(make_splits(&records, 5, 0.1, 42).is_err());
        assert!(make_splits(&records, 1, 0.1, 42).is_err());
        assert!(make_splits(&records, 2, 0.0, 42).is_err());
    }

    fn arb_records() -> impl Strategy<Value = Vec<SourceImageRecord>> {
        prop::collection::vec((0u8..3, -1i32..4, 1u64..30), 10..120).prop_map(|v| {
            let mut next = 0u64;
            v.into_iter()
                .enumerate()
                .map(|(i, (lic, biome, n))| {
                    let license = [License::CcBy, License::CcByNc, License::CcBySa][lic as usize % 3];
                    let r = rec(&format!("oam-{i:04}"), license, biome, next..next + n);
                    next += n;
                    r
                })
                .collect()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn split_properties(records in arb_records(), seed in any::<u64>()) {
            prop_assume!(records.iter().filter(|r| r.license != License::CcBySa).count() >= 20);
            let s = make_splits(&records, 5, 0.1, seed).unwrap();
            prop_assert_eq!(s.sources.len(), records.len());
            for r in &records {
                let a = s.sources[&r.oam_id];
                if r.license == License::CcBySa {
                    prop_assert_eq!(a, Assignment::Holdout);
                }
                for t in &r.tile_ids {
                    prop_assert_eq!(s.tiles[t], a);
                }
            }
            let mut per_biome: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
            for r in &records {
                if let Assignment::Train { fold } = s.sources[&r.oam_id] {
                    per_biome.entry(r.biome.unwrap()).or_insert_with(|| vec![0; 5])[fold] += 1;
                }
            }
            for counts in per_biome.values() {
                prop_assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
            }
            let again = make_splits(&records, 5, 0.1, seed).unwrap();
            prop_assert_eq!(s.to_json().unwrap(), again.to_json().unwrap());
        }
    }
}
