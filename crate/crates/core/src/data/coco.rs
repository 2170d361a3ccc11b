//! COCO-style export. Every record becomes a `gaze_target` annotation
//! followed by a `head` annotation carrying the person id; a `videos` array
//! keeps the per-video headers so the export inverts exactly.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{DataError, FrameKey, Role, VgsDataset, VgsRecord, VideoHeader};
use crate::geometry::BBox;

pub const GAZE_CATEGORY: u64 = 1;
pub const HEAD_CATEGORY: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoInfo {
    pub description: String,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
    pub video: String,
    pub frame: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: BBox,
    pub area: f64,
    pub iscrowd: u8,
    pub person_id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub identity: Option<Role>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoDocument {
    pub info: CocoInfo,
    pub videos: Vec<VideoHeader>,
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

pub fn vgs_to_coco(ds: &VgsDataset) -> Result<CocoDocument, DataError> {
    ds.validate()?;
    let mut images = Vec::new();
    let mut image_ids: HashMap<FrameKey, u64> = HashMap::new();
    let mut annotations = Vec::new();
    for r in &ds.records {
        let key = r.frame_key();
        let image_id = match image_ids.get(&key) {
            Some(&id) => id,
            None => {
                let h = ds.header(&r.video).expect("validated");
                let id = images.len() as u64 + 1;
                images.push(CocoImage {
                    id,
                    file_name: format!("{}.png", key.stem()),
                    width: h.width,
                    height: h.height,
                    video: r.video.clone(),
                    frame: r.frame,
                });
                image_ids.insert(key, id);
                id
            }
        };
        for (category_id, bbox, identity) in [(GAZE_CATEGORY, r.gaze, None), (HEAD_CATEGORY, r.head, r.label)] {
            annotations.push(CocoAnnotation {
                id: annotations.len() as u64 + 1,
                image_id,
                category_id,
                bbox,
                area: bbox.area(),
                iscrowd: 0,
                person_id: r.person_id,
                identity,
            });
        }
    }
    Ok(CocoDocument {
        info: CocoInfo { description: "VGS gaze-following annotations".into(), version: "1".into() },
        videos: ds.videos.clone(),
        images,
        annotations,
        categories: vec![
            CocoCategory { id: GAZE_CATEGORY, name: "gaze_target".into() },
            CocoCategory { id: HEAD_CATEGORY, name: "head".into() },
        ],
    })
}

pub fn coco_to_vgs(doc: &CocoDocument) -> Result<VgsDataset, DataError> {
    let images: HashMap<u64, &CocoImage> = doc.images.iter().map(|i| (i.id, i)).collect();
    let heads: HashMap<(u64, u32), &CocoAnnotation> = doc
        .annotations
        .iter()
        .filter(|a| a.category_id == HEAD_CATEGORY)
        .map(|a| ((a.image_id, a.person_id), a))
        .collect();
    let mut records = Vec::new();
    for (i, a) in doc.annotations.iter().enumerate() {
        if a.category_id != GAZE_CATEGORY {
            continue;
        }
        let image = images.get(&a.image_id).ok_or_else(|| {
            DataError::parse(i + 1, format!("annotation {} references missing image {}", a.id, a.image_id))
        })?;
        let head = heads.get(&(a.image_id, a.person_id)).ok_or_else(|| {
            DataError::parse(i + 1, format!("gaze annotation {} has no head for person {}", a.id, a.person_id))
        })?;
        records.push(VgsRecord {
            video: image.video.clone(),
            frame: image.frame,
            person_id: a.person_id,
            head: head.bbox,
            gaze: a.bbox,
            label: head.identity,
        });
    }
    let ds = VgsDataset { videos: doc.videos.clone(), records };
    ds.validate()?;
    Ok(ds)
}

pub fn head_box_of(doc: &CocoDocument, image_id: u64, person_id: u32) -> Option<BBox> {
    doc.annotations
        .iter()
        .find(|a| a.category_id == HEAD_CATEGORY && a.image_id == image_id && a.person_id == person_id)
        .map(|a| a.bbox)
}
