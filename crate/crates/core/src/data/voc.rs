//! Pascal VOC export: one XML document per frame, two objects per record.
//!
//! `bndbox` uses `xmax = x + w`, `ymax = y + h` (the far edge, not the last
//! covered pixel). Documents are emitted in order of first frame appearance
//! and objects in record order, so re-import restores any dataset whose
//! records are grouped by frame. Coordinates written by annotation tools are
//! pixel integers, for which `xmax - xmin` recovers `w` exactly.

use std::collections::HashMap;
use std::fmt::Write as _;

use super::{DataError, FrameKey, Role, VgsDataset, VgsRecord, VideoHeader};
use crate::geometry::BBox;

#[derive(Debug, Clone, PartialEq)]
pub struct VocDocument {
    /// `<video>/<frame:06>.xml`
    pub path: String,
    pub xml: String,
}

pub fn vgs_to_voc(ds: &VgsDataset) -> Result<Vec<VocDocument>, DataError> {
    ds.validate()?;
    let mut order: Vec<FrameKey> = Vec::new();
    let mut groups: HashMap<FrameKey, Vec<&VgsRecord>> = HashMap::new();
    for r in &ds.records {
        let k = r.frame_key();
        groups.entry(k.clone()).or_insert_with(|| {
            order.push(k);
            Vec::new()
        });
        groups.get_mut(&r.frame_key()).expect("inserted").push(r);
    }
    Ok(order
        .into_iter()
        .map(|k| {
            let h = ds.header(&k.video).expect("validated");
            let xml = frame_xml(&k, h, &groups[&k]);
            VocDocument { path: format!("{}.xml", k.stem()), xml }
        })
        .collect())
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn unescape(s: &str) -> String {
    s.replace("&lt;", "<").replace("&gt;", ">").replace("&amp;", "&")
}

fn frame_xml(k: &FrameKey, h: &VideoHeader, records: &[&VgsRecord]) -> String {
    let mut x = String::new();
    x.push_str("<annotation>\n");
    let _ = writeln!(x, "  <folder>{}</folder>", escape(&k.video));
    let _ = writeln!(x, "  <filename>{:06}.png</filename>", k.frame);
    let _ = writeln!(x, "  <frame>{}</frame>", k.frame);
    let _ = writeln!(x, "  <fps>{}</fps>", h.fps);
    let _ = writeln!(
        x,
        "  <size>\n    <width>{}</width>\n    <height>{}</height>\n    <depth>3</depth>\n  </size>",
        h.width, h.height
    );
    for r in records {
        for (name, b, identity) in [("gaze_target", r.gaze, None), ("head", r.head, r.label)] {
            x.push_str("  <object>\n");
            let _ = writeln!(x, "    <name>{name}</name>");
            let _ = writeln!(x, "    <person_id>{}</person_id>", r.person_id);
            if let Some(role) = identity {
                let _ = writeln!(x, "    <identity>{}</identity>", role.as_str());
            }
            let _ = writeln!(
                x,
                "    <bndbox>\n      <xmin>{}</xmin>\n      <ymin>{}</ymin>\n      <xmax>{}</xmax>\n      <ymax>{}</ymax>\n    </bndbox>",
                b.x,
                b.y,
                b.x2(),
                b.y2()
            );
            x.push_str("  </object>\n");
        }
    }
    x.push_str("</annotation>\n");
    x
}

/// Text content of every `<tag>...</tag>` in `s`, in order.
fn elements<'a>(s: &'a str, tag: &str) -> Vec<&'a str> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let mut out = Vec::new();
    let mut rest = s;
    while let Some(start) = rest.find(&open) {
        let body = &rest[start + open.len()..];
        match body.find(&close) {
            Some(end) => {
                out.push(&body[..end]);
                rest = &body[end + close.len()..];
            }
            None => break,
        }
    }
    out
}

fn one<'a>(s: &'a str, tag: &str, doc: &str) -> Result<&'a str, DataError> {
    elements(s, tag).first().copied().ok_or_else(|| DataError::Format(format!("{doc}: missing <{tag}>")))
}

fn num<T: std::str::FromStr>(s: &str, tag: &str, doc: &str) -> Result<T, DataError> {
    let v = one(s, tag, doc)?;
    v.trim().parse().map_err(|_| DataError::Format(format!("{doc}: <{tag}> value {v:?} is not a number")))
}

pub fn voc_to_vgs(docs: &[VocDocument]) -> Result<VgsDataset, DataError> {
    let mut ds = VgsDataset::default();
    for doc in docs {
        let p = doc.path.as_str();
        let video = unescape(one(&doc.xml, "folder", p)?);
        let frame: u32 = num(&doc.xml, "frame", p)?;
        let size = one(&doc.xml, "size", p)?;
        let header = VideoHeader {
            video: video.clone(),
            fps: num(&doc.xml, "fps", p)?,
            width: num(size, "width", p)?,
            height: num(size, "height", p)?,
        };
        match ds.header(&video) {
            Some(h) if *h != header => {
                return Err(DataError::Format(format!("{p}: header disagrees with earlier frames of {video}")));
            }
            Some(_) => {}
            None => ds.videos.push(header),
        }
        let mut pending: HashMap<u32, BBox> = HashMap::new();
        let mut order: Vec<u32> = Vec::new();
        let mut heads: HashMap<u32, (BBox, Option<Role>)> = HashMap::new();
        for obj in elements(&doc.xml, "object") {
            let name = one(obj, "name", p)?;
            let person: u32 = num(obj, "person_id", p)?;
            let bb = one(obj, "bndbox", p)?;
            let (x1, y1, x2, y2): (f64, f64, f64, f64) =
                (num(bb, "xmin", p)?, num(bb, "ymin", p)?, num(bb, "xmax", p)?, num(bb, "ymax", p)?);
            let b = BBox::new(x1, y1, x2 - x1, y2 - y1);
            match name {
                "gaze_target" => {
                    pending.insert(person, b);
                    order.push(person);
                }
                "head" => {
                    let identity = match elements(obj, "identity").first() {
                        Some(s) => Some(
                            Role::parse(s).ok_or_else(|| DataError::Format(format!("{p}: unknown identity {s:?}")))?,
                        ),
                        None => None,
                    };
                    heads.insert(person, (b, identity));
                }
                other => return Err(DataError::Format(format!("{p}: unknown object class {other:?}"))),
            }
        }
        for person in order {
            let (head, label) = *heads
                .get(&person)
                .ok_or_else(|| DataError::Format(format!("{p}: person {person} has no head object")))?;
            ds.records.push(VgsRecord {
                video: video.clone(),
                frame,
                person_id: person,
                head,
                gaze: pending[&person],
                label,
            });
        }
    }
    ds.validate()?;
    Ok(ds)
}
