use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{proposal_depth, BBox, ClassEntry, ClassVocabulary, DepthMap, GtBox, ImageRecord};
use crate::error::{Error, Result};
use crate::numkit::Matrix;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordJson {
    image_id: String,
    width: u32,
    height: u32,
    proposals: Vec<[f64; 4]>,
    rgb_features: Vec<Vec<f64>>,
    depth_features: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    proposal_depths: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    caption: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gt_boxes: Option<Vec<[f64; 5]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    depth_map: Option<String>,
}

fn features(rows: Vec<Vec<f64>>, image_id: &str, field: &'static str) -> Result<Matrix<f64>> {
    Matrix::from_rows(&rows).map_err(|_| Error::validation(image_id, field, "ragged feature rows"))
}

impl RecordJson {
    fn into_record(self, base_dir: Option<&Path>) -> Result<ImageRecord> {
        let id = self.image_id.clone();
        let proposals: Vec<BBox> = self.proposals.into_iter().map(BBox::from_array).collect();
        let rgb_features = features(self.rgb_features, &id, "rgb_features")?;
        let depth_features = features(self.depth_features, &id, "depth_features")?;

        let depth_map = match &self.depth_map {
            Some(rel) => {
                let path = base_dir.map_or_else(|| Path::new(rel).to_path_buf(), |d| d.join(rel));
                Some(load_depth_map(&path)?)
            }
            None => None,
        };
        // precomputed depths win over the sidecar map
        let proposal_depths = match (self.proposal_depths, &depth_map) {
            (Some(d), _) => d,
            (None, Some(map)) => proposals
                .iter()
                .enumerate()
                .map(|(i, b)| {
                    proposal_depth(map, b).map_err(|e| {
                        Error::validation(&id, "proposals", format!("box {i}: {e}"))
                    })
                })
                .collect::<Result<_>>()?,
            (None, None) => {
                return Err(Error::validation(
                    &id,
                    "proposal_depths",
                    "missing and no depth_map sidecar given",
                ))
            }
        };

        let gt_boxes = self
            .gt_boxes
            .map(|gts| {
                gts.into_iter()
                    .map(|g| {
                        let c = g[4];
                        if c < 0.0 || c.fract() != 0.0 {
                            return Err(Error::validation(
                                &id,
                                "gt_boxes",
                                format!("class id {c} is not a non-negative integer"),
                            ));
                        }
                        Ok(GtBox {
                            bbox: BBox::new(g[0], g[1], g[2], g[3]),
                            class_id: c as usize,
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .transpose()?;

        Ok(ImageRecord {
            image_id: self.image_id,
            width: self.width,
            height: self.height,
            proposals,
            rgb_features,
            depth_features,
            proposal_depths,
            caption: self.caption,
            labels: self.labels.map(|l| l.into_iter().collect::<BTreeSet<_>>()),
            gt_boxes,
            depth_map_file: self.depth_map,
            depth_map,
        })
    }

    fn from_record(r: &ImageRecord) -> Self {
        RecordJson {
            image_id: r.image_id.clone(),
            width: r.width,
            height: r.height,
            proposals: r.proposals.iter().map(|b| b.to_array()).collect(),
            rgb_features: r.rgb_features.to_rows(),
            depth_features: r.depth_features.to_rows(),
            proposal_depths: Some(r.proposal_depths.clone()),
            caption: r.caption.clone(),
            labels: r.labels.as_ref().map(|l| l.iter().copied().collect()),
            gt_boxes: r.gt_boxes.as_ref().map(|g| {
                g.iter()
                    .map(|g| {
                        let [a, b, c, d] = g.bbox.to_array();
                        [a, b, c, d, g.class_id as f64]
                    })
                    .collect()
            }),
            depth_map: r.depth_map_file.clone(),
        }
    }
}

/// Parses and validates one JSONL line. `base_dir` resolves sidecar paths.
pub fn parse_record(
    line: &str,
    line_no: usize,
    vocab: &ClassVocabulary,
    base_dir: Option<&Path>,
) -> Result<ImageRecord> {
    let raw: RecordJson = serde_json::from_str(line).map_err(|e| Error::Parse {
        line: line_no,
        msg: e.to_string(),
    })?;
    let record = raw.into_record(base_dir)?;
    record.validate(vocab.len())?;
    Ok(record)
}

/// Reads a JSON Lines dataset; blank lines are ignored.
pub fn load_dataset(path: &Path, vocab: &ClassVocabulary) -> Result<Vec<ImageRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent();
    let mut records = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = parse_record(&line, n + 1, vocab, base)?;
        if let Some(first) = records.first() {
            let first: &ImageRecord = first;
            if rec.feature_dim() != first.feature_dim() {
                return Err(Error::validation(
                    &rec.image_id,
                    "rgb_features",
                    format!(
                        "feature dim {} differs from dataset dim {}",
                        rec.feature_dim(),
                        first.feature_dim()
                    ),
                ));
            }
        }
        records.push(rec);
    }
    Ok(records)
}

pub fn save_dataset(path: &Path, records: &[ImageRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, &RecordJson::from_record(r))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_depth_map(path: &Path) -> Result<DepthMap> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let map: DepthMap = serde_json::from_str(&text)?;
    map.check()
        .map_err(|m| Error::validation(&path.display().to_string(), "depth_map", m))?;
    Ok(map)
}

pub fn load_vocabulary(path: &Path) -> Result<ClassVocabulary> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let entries: Vec<ClassEntry> = serde_json::from_str(&text)?;
    ClassVocabulary::new(entries)
}

pub fn save_vocabulary(path: &Path, vocab: &ClassVocabulary) -> Result<()> {
    let text = serde_json::to_string_pretty(vocab.entries())?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = r#"{"image_id":"a","width":10,"height":10,"proposals":[[0,0,5,5],[2,2,8,9]],"rgb_features":[[1,0],[0,1]],"depth_features":[[0.5,0.5],[0,0]],"proposal_depths":[0.2,0.7],"caption":"a bird","labels":[0],"gt_boxes":[[0,0,5,5,0]]}"#;

    fn vocab() -> ClassVocabulary {
        ClassVocabulary::from_names(&["bird"]).unwrap()
    }

    #[test]
    fn parses_good_line() {
        let r = parse_record(GOOD, 1, &vocab(), None).unwrap();
        assert_eq!(r.num_proposals(), 2);
        assert_eq!(r.gt_boxes.unwrap()[0].class_id, 0);
    }

    #[test]
    fn degenerate_box() {
        let line = GOOD.replace("[2,2,8,9]", "[8,2,8,9]");
        let err = parse_record(&line, 1, &vocab(), None).unwrap_err();
        assert!(err.to_string().contains("degenerate box"), "{err}");
        assert!(err.to_string().contains("`a`"), "{err}");
    }

    #[test]
    fn feature_count_mismatch() {
        let line = GOOD.replace("\"rgb_features\":[[1,0],[0,1]]", "\"rgb_features\":[[1,0]]");
        let err = parse_record(&line, 1, &vocab(), None).unwrap_err();
        assert!(err.to_string().contains("feature/proposal count mismatch"), "{err}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = parse_record("{not json", 7, &vocab(), None).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 7, .. }));
    }

    #[test]
    fn out_of_range_values() {
        for (from, to) in [
            ("\"proposal_depths\":[0.2,0.7]", "\"proposal_depths\":[0.2,1.7]"),
            ("\"labels\":[0]", "\"labels\":[3]"),
            ("[2,2,8,9]", "[2,2,8,19]"),
        ] {
            assert!(parse_record(&GOOD.replace(from, to), 1, &vocab(), None).is_err());
        }
    }

    #[test]
    fn sidecar_depth_map_fills_depths() {
        let dir = tempfile::tempdir().unwrap();
        let map = DepthMap::new(10, 10, vec![0.25; 100]).unwrap();
        std::fs::write(dir.path().join("d.json"), serde_json::to_string(&map).unwrap()).unwrap();
        let line = GOOD.replace("\"proposal_depths\":[0.2,0.7]", "\"depth_map\":\"d.json\"");
        let r = parse_record(&line, 1, &vocab(), Some(dir.path())).unwrap();
        assert_eq!(r.proposal_depths, vec![0.25, 0.25]);
        // precomputed values take precedence
        let both = GOOD.replace("\"caption\"", "\"depth_map\":\"d.json\",\"caption\"");
        let r = parse_record(&both, 1, &vocab(), Some(dir.path())).unwrap();
        assert_eq!(r.proposal_depths, vec![0.2, 0.7]);
    }
}
