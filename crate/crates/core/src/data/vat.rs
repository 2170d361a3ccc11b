//! VideoAttentionTarget-style CSV: one row per record with the head corners
//! and the centre of the gaze target. Target extent and identity labels are
//! not representable; re-import yields zero-size target boxes at the centre.

use std::collections::HashMap;
use std::fmt::Write as _;

use super::{DataError, VgsDataset, VgsRecord, VideoHeader};
use crate::geometry::BBox;

pub const VAT_HEADER: &str = "frame_path,person_id,head_xmin,head_ymin,head_xmax,head_ymax,gaze_x,gaze_y";

pub fn vgs_to_vat(ds: &VgsDataset) -> Result<String, DataError> {
    ds.validate()?;
    let mut out = String::from(VAT_HEADER);
    out.push('\n');
    for r in &ds.records {
        let (gx, gy) = r.gaze.center();
        let _ = writeln!(
            out,
            "{}.png,{},{},{},{},{},{},{}",
            r.frame_key().stem(),
            r.person_id,
            r.head.x,
            r.head.y,
            r.head.x2(),
            r.head.y2(),
            gx,
            gy
        );
    }
    Ok(out)
}

/// Result of a VAT import; `lossy` is always set because target extents and
/// identity labels are not part of the format.
#[derive(Debug, Clone, PartialEq)]
pub struct VatImport {
    pub dataset: VgsDataset,
    pub lossy: bool,
}

/// Parses VAT rows. Headers come from `videos`; unknown videos get the
/// standard 1280x720 @ 25 fps header.
pub fn vat_to_vgs(text: &str, videos: &[VideoHeader]) -> Result<VatImport, DataError> {
    let known: HashMap<&str, &VideoHeader> = videos.iter().map(|v| (v.video.as_str(), v)).collect();
    let mut ds = VgsDataset::default();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() || raw == VAT_HEADER {
            continue;
        }
        let cols: Vec<&str> = raw.split(',').collect();
        if cols.len() != 8 {
            return Err(DataError::parse(line, format!("expected 8 columns, got {}", cols.len())));
        }
        let (video, frame) =
            parse_frame_path(cols[0]).ok_or_else(|| DataError::parse(line, format!("bad frame path {:?}", cols[0])))?;
        let person_id: u32 =
            cols[1].parse().map_err(|_| DataError::parse(line, format!("bad person id {:?}", cols[1])))?;
        let mut v = [0.0; 6];
        for (k, c) in cols[2..].iter().enumerate() {
            v[k] = c.parse().map_err(|_| DataError::parse(line, format!("bad number {c:?}")))?;
        }
        if ds.header(&video).is_none() {
            let h = known.get(video.as_str()).map(|h| (*h).clone()).unwrap_or_else(|| VideoHeader::standard(&video));
            ds.videos.push(h);
        }
        ds.records.push(VgsRecord {
            video,
            frame,
            person_id,
            head: BBox::new(v[0], v[1], v[2] - v[0], v[3] - v[1]),
            gaze: BBox::new(v[4], v[5], 0.0, 0.0),
            label: None,
        });
    }
    ds.validate()?;
    Ok(VatImport { dataset: ds, lossy: true })
}

fn parse_frame_path(p: &str) -> Option<(String, u32)> {
    let stem = p.strip_suffix(".png")?;
    let (video, frame) = stem.rsplit_once('/')?;
    Some((video.to_string(), frame.parse().ok()?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Role;

    #[test]
    fn target_centre_and_lossy_reimport() {
        let ds = VgsDataset {
            videos: vec![VideoHeader::standard("chat")],
            records: vec![VgsRecord {
                video: "chat".into(),
                frame: 12,
                person_id: 3,
                head: BBox::new(10.0, 20.0, 30.0, 40.0),
                gaze: BBox::new(100.0, 100.0, 50.0, 50.0),
                label: Some(Role::Listener),
            }],
        };
        let csv = vgs_to_vat(&ds).unwrap();
        let rows: Vec<&str> = csv.lines().collect();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1], "chat/000012.png,3,10,20,40,60,125,125");
        let back = vat_to_vgs(&csv, &ds.videos).unwrap();
        assert!(back.lossy);
        let r = &back.dataset.records[0];
        assert_eq!(r.head, ds.records[0].head);
        assert_eq!(r.gaze, BBox::new(125.0, 125.0, 0.0, 0.0));
        assert_eq!(r.label, None);
    }

    #[test]
    fn wrong_column_count_is_reported() {
        let err = vat_to_vgs("a.png,1,2\n", &[]).unwrap_err();
        assert!(matches!(err, DataError::Parse { line: 1, .. }));
    }
}
