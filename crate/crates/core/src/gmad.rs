//! Group maximum differentiation: pairs that a defender model rates equal
//! while an attacker separates them as far as possible.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::file_sha256;
use crate::data::DatasetManifest;
use crate::error::{Error, Result};
use crate::pipeline::{predict_image, LoadedDataset, QualityModel};

/// Fraction of the defender's score range used as the default tolerance.
pub const DEFAULT_EPSILON_FRACTION: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct GmadQuery {
    pub attacker: Vec<f64>,
    pub defender: Vec<f64>,
    pub level_count: usize,
    pub epsilon: f64,
}

impl GmadQuery {
    pub fn new(attacker: Vec<f64>, defender: Vec<f64>, level_count: usize, epsilon: f64) -> Result<Self> {
        if attacker.len() != defender.len() {
            return Err(Error::Shape(format!(
                "{} attacker scores against {} defender scores",
                attacker.len(),
                defender.len()
            )));
        }
        if level_count == 0 || !(epsilon > 0.0) {
            return Err(Error::InvalidArgument(
                "need at least one level and a positive tolerance".into(),
            ));
        }
        if attacker.iter().chain(&defender).any(|v| !v.is_finite()) {
            return Err(Error::Degenerate("non-finite score".into()));
        }
        Ok(Self {
            attacker,
            defender,
            level_count,
            epsilon,
        })
    }

    /// Tolerance = `fraction` of the defender's score range.
    pub fn with_relative_epsilon(
        attacker: Vec<f64>,
        defender: Vec<f64>,
        level_count: usize,
        fraction: f64,
    ) -> Result<Self> {
        let lo = defender.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = defender.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !(hi > lo) {
            return Err(Error::Degenerate("defender scores have zero range".into()));
        }
        Self::new(attacker, defender, level_count, fraction * (hi - lo))
    }
}

/// Image indices per level, lowest defender scores first. Ties in score are
/// ordered by index.
pub fn quality_levels(defender: &[f64], level_count: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..defender.len()).collect();
    idx.sort_by(|&a, &b| defender[a].total_cmp(&defender[b]).then(a.cmp(&b)));
    let n = idx.len();
    (0..level_count)
        .map(|k| {
            let mut v = idx[k * n / level_count..(k + 1) * n / level_count].to_vec();
            v.sort_unstable();
            v
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GmadPair {
    pub level: usize,
    pub a: usize,
    pub b: usize,
    pub gap: f64,
}

/// Per level, the pair with the largest attacker gap among those whose
/// defender scores differ by at most ε.
pub fn gmad_pairs(query: &GmadQuery) -> Result<Vec<GmadPair>> {
    let (att, def) = (&query.attacker, &query.defender);
    quality_levels(def, query.level_count)
        .iter()
        .enumerate()
        .map(|(level, members)| {
            if members.len() < 2 {
                return Err(Error::Degenerate(format!(
                    "level {level} holds {} images",
                    members.len()
                )));
            }
            let mut best: Option<GmadPair> = None;
            for (x, &i) in members.iter().enumerate() {
                for &j in &members[x + 1..] {
                    if (def[i] - def[j]).abs() > query.epsilon {
                        continue;
                    }
                    let gap = (att[i] - att[j]).abs();
                    if best.is_none_or(|b| gap > b.gap) {
                        best = Some(GmadPair { level, a: i, b: j, gap });
                    }
                }
            }
            best.ok_or_else(|| Error::Degenerate(format!("level {level} has no pair within the tolerance")))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmadResult {
    pub level: usize,
    /// "<attacker> attacks <defender>".
    pub role: String,
    pub attacker: String,
    pub defender: String,
    pub a: usize,
    pub b: usize,
    pub att_a: f64,
    pub att_b: f64,
    pub def_a: f64,
    pub def_b: f64,
}

/// Both role assignments of two models; results are ordered by role then level.
pub fn gmad_competition(
    (name_a, scores_a): (&str, &[f64]),
    (name_b, scores_b): (&str, &[f64]),
    level_count: usize,
    epsilon_fraction: f64,
) -> Result<Vec<GmadResult>> {
    let mut out = Vec::new();
    for ((an, att), (dn, def)) in [
        ((name_a, scores_a), (name_b, scores_b)),
        ((name_b, scores_b), (name_a, scores_a)),
    ] {
        let q = GmadQuery::with_relative_epsilon(att.to_vec(), def.to_vec(), level_count, epsilon_fraction)?;
        for p in gmad_pairs(&q)? {
            out.push(GmadResult {
                level: p.level,
                role: format!("{an} attacks {dn}"),
                attacker: an.to_string(),
                defender: dn.to_string(),
                a: p.a,
                b: p.b,
                att_a: att[p.a],
                att_b: att[p.b],
                def_a: def[p.a],
                def_b: def[p.b],
            });
        }
    }
    Ok(out)
}

fn level_name(level: usize, count: usize) -> String {
    match (count, level) {
        (2, 0) => "low".into(),
        (2, 1) => "high".into(),
        _ => level.to_string(),
    }
}

pub const GALLERY_HEADER: &str = "level,role,img_a,img_b,att_a,att_b,def_a,def_b,mos_a,mos_b";

/// Writes `gmad.csv` and `gmad.html` under `out_dir`; returns their paths.
pub fn gmad_report(
    results: &[GmadResult],
    manifest: &DatasetManifest,
    level_count: usize,
    out_dir: &Path,
) -> Result<(PathBuf, PathBuf)> {
    if results.is_empty() {
        return Err(Error::InvalidArgument("no gMAD results to report".into()));
    }
    for r in results {
        for i in [r.a, r.b] {
            let rec = manifest
                .records
                .get(i)
                .ok_or_else(|| Error::InvalidArgument(format!("result refers to image {i} outside the manifest")))?;
            let p = manifest.resolve(&rec.path);
            if !p.is_file() {
                return Err(Error::io(
                    &p,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "image file missing"),
                ));
            }
        }
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut csv = csv::Writer::from_writer(Vec::new());
    csv.write_record(GALLERY_HEADER.split(','))?;
    let mut html = String::from(
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>gMAD</title>\n<style>\
         body{font-family:sans-serif}.grid{display:grid;grid-template-columns:repeat(2,1fr);gap:16px}\
         .panel{border:1px solid #ccc;padding:8px}.panel img{width:45%;margin:2%;image-rendering:pixelated}\
         </style></head><body>\n<h1>gMAD gallery</h1>\n<div class=\"grid\">\n",
    );
    for (k, r) in results.iter().enumerate() {
        let (ra, rb) = (&manifest.records[r.a], &manifest.records[r.b]);
        let level = level_name(r.level, level_count);
        csv.write_record([
            level.clone(),
            r.role.clone(),
            ra.path.display().to_string(),
            rb.path.display().to_string(),
            r.att_a.to_string(),
            r.att_b.to_string(),
            r.def_a.to_string(),
            r.def_b.to_string(),
            ra.raw_score.to_string(),
            rb.raw_score.to_string(),
        ])?;
        let label = (b'a' + (k % 26) as u8) as char;
        let _ = write!(
            html,
            "<div class=\"panel\"><h3>({label}) {} fixed at the {level}-quality level</h3>\n\
             <img src=\"{}\"><img src=\"{}\">\n\
             <p>{}: {:.4} / {:.4}<br>{}: {:.4} / {:.4}<br>MOS: {} / {}</p></div>\n",
            r.defender,
            manifest.resolve(&ra.path).display(),
            manifest.resolve(&rb.path).display(),
            r.attacker,
            r.att_a,
            r.att_b,
            r.defender,
            r.def_a,
            r.def_b,
            ra.raw_score,
            rb.raw_score,
        );
    }
    html.push_str("</div>\n</body></html>\n");
    let csv_path = out_dir.join("gmad.csv");
    let html_path = out_dir.join("gmad.html");
    let bytes = csv.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    std::fs::write(&csv_path, bytes).map_err(|e| Error::io(&csv_path, e))?;
    std::fs::write(&html_path, html).map_err(|e| Error::io(&html_path, e))?;
    Ok((csv_path, html_path))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
struct ScoreCacheFile {
    checkpoint_sha256: String,
    n_patches: usize,
    seed: u64,
    scores: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredDatabase {
    pub scores: Vec<f64>,
    /// Images that had to be run through the model.
    pub computed: usize,
}

/// One patch-averaged score per image, cached under `cache_dir` by
/// checkpoint hash and image path.
pub fn score_database(
    model: &QualityModel,
    checkpoint_path: &Path,
    data: &LoadedDataset,
    n_patches: usize,
    seed: u64,
    cache_dir: &Path,
) -> Result<ScoredDatabase> {
    let sha = file_sha256(checkpoint_path)?;
    let cache_path = cache_dir.join(format!("scores-{}-p{n_patches}-s{seed}.json", &sha[..16]));
    let mut cache: ScoreCacheFile = match std::fs::read(&cache_path) {
        Ok(b) => serde_json::from_slice(&b)?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => ScoreCacheFile {
            checkpoint_sha256: sha.clone(),
            n_patches,
            seed,
            ..Default::default()
        },
        Err(e) => return Err(Error::io(&cache_path, e)),
    };
    if cache.checkpoint_sha256 != sha {
        return Err(Error::Checkpoint(format!(
            "score cache {} belongs to another checkpoint",
            cache_path.display()
        )));
    }
    let keys: Vec<String> = data
        .manifest
        .records
        .iter()
        .map(|r| r.path.display().to_string())
        .collect();
    let missing: Vec<usize> = (0..keys.len())
        .filter(|&i| !cache.scores.contains_key(&keys[i]))
        .collect();
    if !missing.is_empty() {
        let imgs: Vec<_> = missing.iter().map(|&i| data.images[i].clone()).collect();
        let emb = model.embeddings(&imgs)?;
        for (k, &i) in missing.iter().enumerate() {
            let z = emb.as_ref().map(|e| e[k].as_slice());
            let s = predict_image(model, &data.images[i], z, n_patches, seed.wrapping_add(i as u64))?;
            cache.scores.insert(keys[i].clone(), s);
        }
        std::fs::create_dir_all(cache_dir).map_err(|e| Error::io(cache_dir, e))?;
        std::fs::write(&cache_path, serde_json::to_vec_pretty(&cache)?).map_err(|e| Error::io(&cache_path, e))?;
    }
    Ok(ScoredDatabase {
        scores: keys.iter().map(|k| cache.scores[k]).collect(),
        computed: missing.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_defender_picks_extreme_attackers() {
        let q = GmadQuery::new(vec![1.0, 5.0, 9.0], vec![0.5; 3], 1, 0.01).unwrap();
        let p = gmad_pairs(&q).unwrap();
        assert_eq!(
            p,
            vec![GmadPair {
                level: 0,
                a: 0,
                b: 2,
                gap: 8.0
            }]
        );
    }

    #[test]
    fn attacker_equal_to_defender_is_bounded_by_epsilon() {
        let s: Vec<f64> = (0..30).map(|i| ((i * 7919) % 11) as f64 / 10.0).collect();
        let q = GmadQuery::with_relative_epsilon(s.clone(), s, 3, 0.02).unwrap();
        for p in gmad_pairs(&q).unwrap() {
            assert!(p.gap <= q.epsilon);
        }
    }

    #[test]
    fn levels_partition_by_defender_rank() {
        let d = [0.9, 0.1, 0.5, 0.3, 0.7, 0.2];
        let l = quality_levels(&d, 2);
        assert_eq!(l, vec![vec![1, 3, 5], vec![0, 2, 4]]);
    }

    #[test]
    fn rejects_bad_queries() {
        assert!(GmadQuery::new(vec![1.0], vec![1.0, 2.0], 1, 0.1).is_err());
        assert!(GmadQuery::new(vec![1.0], vec![1.0], 1, 0.0).is_err());
        let q = GmadQuery::new(vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0], 2, 0.1).unwrap();
        assert!(gmad_pairs(&q).is_err());
        let q = GmadQuery::new(vec![1.0, 2.0], vec![1.0, 2.0], 1, 0.1).unwrap();
        assert!(gmad_pairs(&q).is_err());
    }

    #[test]
    fn roles_swap_the_binding_constraint() {
        let a = [0.0, 1.0, 0.02, 0.98, 0.5, 0.51];
        let b = [0.3, 0.31, 0.9, 0.91, 0.0, 1.0];
        let r = gmad_competition(("A", &a), ("B", &b), 1, 0.05).unwrap();
        assert_eq!(r.len(), 2);
        assert_eq!(r[0].role, "A attacks B");
        assert!((r[0].def_a - r[0].def_b).abs() <= 0.05 + 1e-12);
        assert_eq!(r[1].defender, "A");
        assert!((r[1].def_a - r[1].def_b).abs() <= 0.05 + 1e-12);
    }
}
