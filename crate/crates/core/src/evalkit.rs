//! VOC-style evaluation: greedy matching at IoU > 0.5 with difficult boxes
//! ignored, precision-recall curves, all-points average precision.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::dataio::{sort_detections, GroundTruth, SceneDetections, SceneRecord};
use crate::error::{Error, Result};
use crate::geom::{iou, BoundingBox};

pub const MATCH_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    TruePositive,
    FalsePositive,
    Ignored,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// One outcome per detection, in the order given.
    pub outcomes: Vec<Outcome>,
    pub gt_matched: Vec<bool>,
}

/// Greedy matching of detections (already sorted by descending score) to one
/// scene's ground truth. Each detection takes the highest-IoU box above 0.5
/// among difficult boxes and still-unmatched normal boxes; a difficult pick
/// makes it ignored. Without a pick it is a false positive.
pub fn match_detections(detections: &[(BoundingBox, f64)], truth: &[GroundTruth]) -> MatchResult {
    let mut gt_matched = vec![false; truth.len()];
    let outcomes = detections
        .iter()
        .map(|(b, _)| {
            let mut best: Option<(usize, f64)> = None;
            for (g, t) in truth.iter().enumerate() {
                if !t.difficult && gt_matched[g] {
                    continue;
                }
                let o = iou(b, &t.bbox);
                if o > MATCH_IOU && best.is_none_or(|(_, bo)| o > bo) {
                    best = Some((g, o));
                }
            }
            match best {
                Some((g, _)) if truth[g].difficult => Outcome::Ignored,
                Some((g, _)) => {
                    gt_matched[g] = true;
                    Outcome::TruePositive
                }
                None => Outcome::FalsePositive,
            }
        })
        .collect();
    MatchResult { outcomes, gt_matched }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub score: f64,
    pub tp_cum: usize,
    pub fp_cum: usize,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    pub n_positives: usize,
    pub ap: f64,
}

/// Builds the curve from `(score, outcome)` pairs in ranking order; ignored
/// detections are skipped. AP integrates the precision envelope over recall.
pub fn pr_curve(ranked: &[(f64, Outcome)], n_positives: usize) -> Result<PrCurve> {
    if n_positives == 0 {
        return Err(Error::NoPositives);
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut points = Vec::with_capacity(ranked.len());
    for &(score, outcome) in ranked {
        match outcome {
            Outcome::TruePositive => tp += 1,
            Outcome::FalsePositive => fp += 1,
            Outcome::Ignored => continue,
        }
        points.push(PrPoint {
            score,
            tp_cum: tp,
            fp_cum: fp,
            precision: tp as f64 / (tp + fp) as f64,
            recall: tp as f64 / n_positives as f64,
        });
    }
    let mut envelope: Vec<f64> = points.iter().map(|p| p.precision).collect();
    for k in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, e) in points.iter().zip(&envelope) {
        ap += (p.recall - prev_recall) * e;
        prev_recall = p.recall;
    }
    Ok(PrCurve {
        points,
        n_positives,
        ap: ap.clamp(0.0, 1.0),
    })
}

/// Score at the rank where |precision - recall| is smallest; ties go to the
/// higher score (the earlier rank).
pub fn eq_pr_threshold(curve: &PrCurve) -> Result<f64> {
    let mut best: Option<(f64, f64)> = None;
    for p in &curve.points {
        let gap = (p.precision - p.recall).abs();
        if best.is_none_or(|(g, _)| gap < g) {
            best = Some((gap, p.score));
        }
    }
    best.map(|b| b.1).ok_or(Error::Empty("precision-recall curve"))
}

/// Matching outcomes of a whole detections file against its scenes.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub curve: PrCurve,
    pub ignored: usize,
}

/// Matches each scene's detections, then ranks all detections globally by
/// descending score (ties: box-lexicographic, then scene id). Detections for
/// scenes absent from `scenes` are an error.
pub fn evaluate(scenes: &[SceneRecord], detections: &[SceneDetections]) -> Result<Evaluation> {
    let index: HashMap<&str, &SceneRecord> = scenes.iter().map(|s| (s.scene_id.as_str(), s)).collect();
    let n_positives = scenes
        .iter()
        .flat_map(|s| &s.ground_truth)
        .filter(|g| !g.difficult)
        .count();
    let mut ranked: Vec<(f64, BoundingBox, &str, Outcome)> = Vec::new();
    for sd in detections {
        let scene = index.get(sd.scene_id.as_str()).ok_or_else(|| Error::InvalidScene {
            scene_id: sd.scene_id.clone(),
            message: "detections refer to an unknown scene".into(),
        })?;
        let mut dets = sd.detections.clone();
        sort_detections(&mut dets);
        let m = match_detections(&dets, &scene.ground_truth);
        for ((b, s), o) in dets.iter().zip(m.outcomes) {
            ranked.push((*s, *b, sd.scene_id.as_str(), o));
        }
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.lex_cmp(&b.1)).then(a.2.cmp(b.2)));
    let ignored = ranked.iter().filter(|r| r.3 == Outcome::Ignored).count();
    let pairs: Vec<(f64, Outcome)> = ranked.iter().map(|r| (r.0, r.3)).collect();
    Ok(Evaluation {
        curve: pr_curve(&pairs, n_positives)?,
        ignored,
    })
}

/// `score,tp_cum,fp_cum,precision,recall` rows, six decimals.
pub fn curve_csv(curve: &PrCurve) -> String {
    let mut s = String::from("score,tp_cum,fp_cum,precision,recall\n");
    for p in &curve.points {
        writeln!(
            s,
            "{:.6},{},{},{:.6},{:.6}",
            p.score, p.tp_cum, p.fp_cum, p.precision, p.recall
        )
        .unwrap();
    }
    s
}

/// Minimal SVG line plot of precision against recall.
pub fn curve_svg(curve: &PrCurve, title: &str) -> String {
    let (w, h, m) = (480.0, 400.0, 48.0);
    let px = |r: f64| m + r * (w - 2.0 * m);
    let py = |p: f64| h - m - p * (h - 2.0 * m);
    let mut path = String::new();
    for (k, p) in curve.points.iter().enumerate() {
        let cmd = if k == 0 { 'M' } else { 'L' };
        write!(path, "{cmd}{:.2},{:.2} ", px(p.recall), py(p.precision)).unwrap();
    }
    let title: String = title
        .chars()
        .map(|c| match c {
            '<' | '>' | '&' | '"' => '_',
            c => c,
        })
        .collect();
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#).unwrap();
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<rect x="{m}" y="{m}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        w - 2.0 * m,
        h - 2.0 * m
    )
    .unwrap();
    for t in 0..=4 {
        let v = t as f64 / 4.0;
        writeln!(s, r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="middle">{v:.2}</text>"#, px(v), h - m + 16.0).unwrap();
        writeln!(s, r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="end">{v:.2}</text>"#, m - 6.0, py(v) + 4.0).unwrap();
    }
    writeln!(s, r#"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="middle">recall</text>"#, w / 2.0, h - 10.0).unwrap();
    writeln!(s, r#"<text x="14" y="{:.2}" font-size="12" text-anchor="middle" transform="rotate(-90 14 {:.2})">precision</text>"#, h / 2.0, h / 2.0).unwrap();
    writeln!(s, r#"<text x="{:.2}" y="{:.2}" font-size="13" text-anchor="middle">{title} (AP {:.4})</text>"#, w / 2.0, m - 14.0, curve.ap).unwrap();
    writeln!(s, r#"<path d="{}" fill="none" stroke="steelblue" stroke-width="2"/>"#, path.trim_end()).unwrap();
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use Outcome::*;

    fn gt(x: f64, difficult: bool) -> GroundTruth {
        GroundTruth {
            bbox: BoundingBox::new(x, 0.0, 10.0, 10.0),
            difficult,
        }
    }

    fn det(x: f64, s: f64) -> (BoundingBox, f64) {
        (BoundingBox::new(x, 0.0, 10.0, 10.0), s)
    }

    #[test]
    fn exact_hit_is_true_positive() {
        let m = match_detections(&[det(0.0, 1.0)], &[gt(0.0, false)]);
        assert_eq!(m.outcomes, vec![TruePositive]);
        assert_eq!(m.gt_matched, vec![true]);
    }

    #[test]
    fn duplicate_is_false_positive() {
        let m = match_detections(&[det(0.0, 2.0), det(0.0, 1.0)], &[gt(0.0, false)]);
        assert_eq!(m.outcomes, vec![TruePositive, FalsePositive]);
    }

    #[test]
    fn difficult_hit_is_ignored() {
        let m = match_detections(&[det(0.0, 2.0), det(0.0, 1.0)], &[gt(0.0, true)]);
        assert_eq!(m.outcomes, vec![Ignored, Ignored]);
        assert_eq!(m.gt_matched, vec![false]);
    }

    #[test]
    fn difficult_wins_when_it_overlaps_most() {
        // detection at x=0.5: IoU 95/105 with the box at 0, 85/115 with the box at 2
        let truth = [gt(2.0, false), gt(0.0, true)];
        let m = match_detections(&[det(0.5, 1.0)], &truth);
        assert_eq!(m.outcomes, vec![Ignored]);
        let m = match_detections(&[det(0.5, 1.0)], &[gt(0.0, false), gt(2.0, true)]);
        assert_eq!(m.outcomes, vec![TruePositive]);
    }

    #[test]
    fn unmatched_normal_box_preferred_over_matched_one() {
        let truth = [gt(0.0, false), gt(2.0, false)];
        let m = match_detections(&[det(0.0, 2.0), det(0.5, 1.0)], &truth);
        assert_eq!(m.outcomes, vec![TruePositive, TruePositive]);
    }

    #[test]
    fn low_overlap_is_false_positive() {
        let m = match_detections(&[det(5.0, 1.0)], &[gt(0.0, false)]);
        assert_eq!(m.outcomes, vec![FalsePositive]);
    }

    #[test]
    fn ap_fixtures() {
        let c = pr_curve(&[(3.0, TruePositive), (2.0, FalsePositive), (1.0, TruePositive)], 2).unwrap();
        assert!((c.ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
        let perfect = pr_curve(&[(2.0, TruePositive), (1.0, TruePositive)], 2).unwrap();
        assert_eq!(perfect.ap, 1.0);
        let none = pr_curve(&[(2.0, FalsePositive), (1.0, FalsePositive)], 2).unwrap();
        assert_eq!(none.ap, 0.0);
        assert!(matches!(pr_curve(&[], 0), Err(Error::NoPositives)));
    }

    #[test]
    fn ignored_detections_leave_the_ranking() {
        let c = pr_curve(&[(3.0, TruePositive), (2.5, Ignored), (2.0, FalsePositive)], 1).unwrap();
        assert_eq!(c.points.len(), 2);
        assert_eq!(c.ap, 1.0);
    }

    #[test]
    fn eq_pr_threshold_examples() {
        let perfect = pr_curve(&[(0.9, TruePositive), (0.4, TruePositive)], 2).unwrap();
        assert_eq!(eq_pr_threshold(&perfect).unwrap(), 0.4);
        let c = pr_curve(
            &[(5.0, TruePositive), (4.0, FalsePositive), (3.0, TruePositive), (2.0, FalsePositive), (1.0, TruePositive)],
            4,
        )
        .unwrap();
        let oracle = c
            .points
            .iter()
            .min_by(|a, b| {
                (a.precision - a.recall)
                    .abs()
                    .total_cmp(&(b.precision - b.recall).abs())
                    .then(b.score.total_cmp(&a.score))
            })
            .unwrap()
            .score;
        assert_eq!(eq_pr_threshold(&c).unwrap(), oracle);
        let empty = pr_curve(&[], 1).unwrap();
        assert!(eq_pr_threshold(&empty).is_err());
    }

    #[test]
    fn csv_has_six_decimals() {
        let c = pr_curve(&[(3.0, TruePositive), (2.0, FalsePositive)], 2).unwrap();
        let csv = curve_csv(&c);
        assert_eq!(
            csv,
            "score,tp_cum,fp_cum,precision,recall\n3.000000,1,0,1.000000,0.500000\n2.000000,1,1,0.500000,0.500000\n"
        );
        assert!(curve_svg(&c, "test").starts_with("<svg"));
    }
}
