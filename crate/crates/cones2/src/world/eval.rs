//! Batch scoring of generated images against their prompts and layouts.

use super::oracle::detect_all;
use super::{NormBox, PixelBox, ShapeSpec};
use crate::latent::LatentImage;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// One generated image with the subjects it was supposed to contain.
pub struct EvalItem {
    pub image: LatentImage,
    /// (subject name, expected appearance, target box)
    pub subjects: Vec<(String, ShapeSpec, NormBox)>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SubjectStats {
    pub present: usize,
    pub total: usize,
    pub confused: usize,
    pub ious: Vec<f64>,
}

impl SubjectStats {
    pub fn presence_rate(&self) -> f64 {
        self.present as f64 / self.total.max(1) as f64
    }

    pub fn median_iou(&self) -> f64 {
        if self.ious.is_empty() {
            return 0.0;
        }
        let mut v = self.ious.clone();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub n_images: usize,
    pub n_pairs: usize,
    /// Fraction of (image, subject) pairs detected.
    pub presence_rate: f64,
    /// Fraction of detected pairs whose appearance mismatched.
    pub confusion_rate: f64,
    /// Fraction of images with every subject detected.
    pub all_present_rate: f64,
    pub median_iou: f64,
    pub per_subject: BTreeMap<String, SubjectStats>,
    /// Free-form run metadata (seeds, config hashes).
    pub metadata: BTreeMap<String, String>,
}

/// Scores a batch. Within one image, detections of a category are assigned
/// to that category's subjects injectively (best IoU first), so two
/// same-category subjects cannot both claim a single rendered shape.
pub fn evaluate_run(items: &[EvalItem], metadata: BTreeMap<String, String>) -> EvalReport {
    let mut per_subject: BTreeMap<String, SubjectStats> = BTreeMap::new();
    let mut pairs = 0usize;
    let mut present = 0usize;
    let mut confused = 0usize;
    let mut all_ious = Vec::new();
    let mut images_all_present = 0usize;

    for item in items {
        let (h, w) = (item.image.height(), item.image.width());
        let mut image_all = true;
        // group subject indices by category
        let mut by_cat: BTreeMap<&'static str, Vec<usize>> = BTreeMap::new();
        for (i, (_, spec, _)) in item.subjects.iter().enumerate() {
            by_cat.entry(spec.category.word()).or_default().push(i);
        }
        for (_, subject_idxs) in by_cat {
            let category = item.subjects[subject_idxs[0]].1.category;
            let dets = detect_all(&item.image, category);
            // candidate assignments sorted by IoU, then score
            let mut cands: Vec<(usize, usize, f64)> = Vec::new();
            for &si in &subject_idxs {
                let qbox = PixelBox::from_norm(&item.subjects[si].2, h, w);
                for (di, d) in dets.iter().enumerate() {
                    cands.push((si, di, d.bbox.iou(&qbox)));
                }
            }
            cands.sort_by(|a, b| {
                b.2.partial_cmp(&a.2)
                    .unwrap()
                    .then_with(|| dets[b.1].score.partial_cmp(&dets[a.1].score).unwrap())
                    .then_with(|| (a.0, a.1).cmp(&(b.0, b.1)))
            });
            let mut used_subject = vec![false; item.subjects.len()];
            let mut used_det = vec![false; dets.len()];
            let mut assigned: Vec<(usize, usize, f64)> = Vec::new();
            for (si, di, iou) in cands {
                if used_subject[si] || used_det[di] {
                    continue;
                }
                used_subject[si] = true;
                used_det[di] = true;
                assigned.push((si, di, iou));
            }
            for &si in &subject_idxs {
                let (name, spec, _) = &item.subjects[si];
                let stats = per_subject.entry(name.clone()).or_insert(SubjectStats {
                    present: 0,
                    total: 0,
                    confused: 0,
                    ious: Vec::new(),
                });
                stats.total += 1;
                pairs += 1;
                if let Some(&(_, di, iou)) = assigned.iter().find(|(s, _, _)| *s == si) {
                    stats.present += 1;
                    present += 1;
                    stats.ious.push(iou);
                    all_ious.push(iou);
                    if dets[di].appearance != spec.appearance() {
                        stats.confused += 1;
                        confused += 1;
                    }
                } else {
                    image_all = false;
                }
            }
        }
        if image_all && !item.subjects.is_empty() {
            images_all_present += 1;
        }
    }

    let median = {
        let mut v = all_ious.clone();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if v.is_empty() {
            0.0
        } else if v.len() % 2 == 1 {
            v[v.len() / 2]
        } else {
            0.5 * (v[v.len() / 2 - 1] + v[v.len() / 2])
        }
    };
    EvalReport {
        n_images: items.len(),
        n_pairs: pairs,
        presence_rate: present as f64 / pairs.max(1) as f64,
        confusion_rate: confused as f64 / present.max(1) as f64,
        all_present_rate: images_all_present as f64 / items.len().max(1) as f64,
        median_iou: median,
        per_subject,
        metadata,
    }
}
