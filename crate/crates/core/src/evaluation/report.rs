use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{attack_success_rate, average_precision, frame_success, iou, EvalError};
use crate::model::{Detection, EvalConfig, FrameTruth};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Ap,
    Asr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetadataAxis {
    Angle,
    Distance,
}

impl MetadataAxis {
    pub fn name(self) -> &'static str {
        match self {
            Self::Angle => "angle",
            Self::Distance => "distance",
        }
    }

    fn value(self, t: &FrameTruth) -> Option<f64> {
        match self {
            Self::Angle => t.angle_deg,
            Self::Distance => t.distance_m,
        }
    }
}

/// Everything needed to recompute a frame's contribution to a metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub image_id: String,
    /// Attack succeeded on this frame under the ASR rule.
    pub success: bool,
    /// Target truths overlapped at the IoU threshold by some detection.
    pub matched_truths: usize,
    pub best_iou: f64,
    pub max_confidence: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub angle_deg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distance_m: Option<f64>,
    pub detections: Vec<Detection>,
    pub truth: FrameTruth,
}

impl FrameRecord {
    pub fn new(detections: Vec<Detection>, truth: FrameTruth, cfg: &EvalConfig) -> Self {
        let targets: Vec<_> = truth.boxes.iter().filter(|b| b.class == cfg.target_class).collect();
        let dets: Vec<_> = detections.iter().filter(|d| d.class == cfg.target_class).collect();
        let mut best_iou: f64 = 0.0;
        let mut matched = 0;
        for t in &targets {
            let best = dets.iter().map(|d| iou(&d.bbox, &t.bbox)).fold(0.0, f64::max);
            best_iou = best_iou.max(best);
            if best >= cfg.iou_threshold {
                matched += 1;
            }
        }
        Self {
            image_id: truth.image_id.clone(),
            success: frame_success(&detections, &truth, cfg),
            matched_truths: matched,
            best_iou,
            max_confidence: dets.iter().map(|d| d.confidence).fold(0.0, f64::max),
            angle_deg: truth.angle_deg,
            distance_m: truth.distance_m,
            detections,
            truth,
        }
    }
}

/// Metric over a set of records.
pub fn metric_value(metric: MetricKind, records: &[&FrameRecord], cfg: &EvalConfig) -> Result<f64, EvalError> {
    match metric {
        MetricKind::Ap => {
            let dets: Vec<Vec<Detection>> = records.iter().map(|r| r.detections.clone()).collect();
            let truths: Vec<FrameTruth> = records.iter().map(|r| r.truth.clone()).collect();
            average_precision(&dets, &truths, cfg)
        }
        MetricKind::Asr => {
            let frames: Vec<(Vec<Detection>, FrameTruth)> =
                records.iter().map(|r| (r.detections.clone(), r.truth.clone())).collect();
            attack_success_rate(&frames, cfg)
        }
    }
}

/// Contiguous buckets `[e0,e1), [e1,e2), …, [e(n-1), e(n)]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Buckets {
    pub axis: MetadataAxis,
    pub edges: Vec<f64>,
}

impl Buckets {
    pub fn new(axis: MetadataAxis, edges: Vec<f64>) -> Result<Self, EvalError> {
        if edges.len() < 2 {
            return Err(EvalError::Buckets("need at least two edges".into()));
        }
        if edges.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(EvalError::Buckets("edges must increase strictly".into()));
        }
        Ok(Self { axis, edges })
    }

    /// Equal-width buckets covering `[lo, hi]`.
    pub fn uniform(axis: MetadataAxis, lo: f64, hi: f64, width: f64) -> Result<Self, EvalError> {
        if !(width > 0.0 && hi > lo) {
            return Err(EvalError::Buckets(format!("bad range [{lo}, {hi}] / {width}")));
        }
        let n = ((hi - lo) / width - 1e-9).ceil().max(1.0) as usize;
        let edges = (0..=n).map(|i| (lo + i as f64 * width).min(hi)).collect();
        Self::new(axis, edges)
    }

    /// Angle buckets spanning `[−180, 180]`.
    pub fn angles(width: f64) -> Result<Self, EvalError> {
        Self::uniform(MetadataAxis::Angle, -180.0, 180.0, width)
    }

    pub fn len(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, v: f64) -> Option<usize> {
        let n = self.len();
        if v < self.edges[0] || v > self.edges[n] {
            return None;
        }
        Some(self.edges[1..].iter().position(|&e| v < e).unwrap_or(n - 1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketValue {
    pub lo: f64,
    pub hi: f64,
    pub frames: usize,
    /// `None` for buckets without frames.
    pub value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisBreakdown {
    pub axis: MetadataAxis,
    pub buckets: Vec<BucketValue>,
    /// Mean over non-empty buckets, not over frames.
    pub mean: f64,
}

/// Per-bucket metric and the mean across buckets.
pub fn aggregate(records: &[FrameRecord], buckets: &Buckets, metric: MetricKind, cfg: &EvalConfig) -> Result<AxisBreakdown, EvalError> {
    let missing: Vec<String> = records
        .iter()
        .filter(|r| buckets.axis.value(&r.truth).is_none())
        .map(|r| r.image_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(EvalError::MissingMetadata {
            axis: buckets.axis.name(),
            frames: missing,
        });
    }
    let mut groups: Vec<Vec<&FrameRecord>> = vec![Vec::new(); buckets.len()];
    for r in records {
        let v = buckets.axis.value(&r.truth).expect("checked above");
        let i = buckets
            .index(v)
            .ok_or_else(|| EvalError::Buckets(format!("frame {} value {v} outside buckets", r.image_id)))?;
        groups[i].push(r);
    }
    let mut out = Vec::with_capacity(groups.len());
    let (mut sum, mut n) = (0.0, 0usize);
    for (i, g) in groups.iter().enumerate() {
        let value = if g.is_empty() {
            None
        } else {
            let v = metric_value(metric, g, cfg)?;
            sum += v;
            n += 1;
            Some(v)
        };
        out.push(BucketValue {
            lo: buckets.edges[i],
            hi: buckets.edges[i + 1],
            frames: g.len(),
            value,
        });
    }
    if n == 0 {
        return Err(EvalError::EmptyFrameSet);
    }
    Ok(AxisBreakdown {
        axis: buckets.axis,
        buckets: out,
        mean: sum / n as f64,
    })
}

/// A metric value with the per-frame evidence that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: MetricKind,
    pub value: f64,
    pub config: EvalConfig,
    pub records: Vec<FrameRecord>,
    #[serde(default)]
    pub breakdowns: Vec<AxisBreakdown>,
}

impl EvalReport {
    pub fn compute(metric: MetricKind, detections: Vec<Vec<Detection>>, truths: Vec<FrameTruth>, cfg: &EvalConfig) -> Result<Self, EvalError> {
        if detections.len() != truths.len() {
            return Err(EvalError::LengthMismatch {
                detections: detections.len(),
                truths: truths.len(),
            });
        }
        let records: Vec<FrameRecord> = detections
            .into_iter()
            .zip(truths)
            .map(|(d, t)| FrameRecord::new(d, t, cfg))
            .collect();
        let refs: Vec<&FrameRecord> = records.iter().collect();
        let value = metric_value(metric, &refs, cfg)?;
        Ok(Self {
            metric,
            value,
            config: *cfg,
            records,
            breakdowns: Vec::new(),
        })
    }

    /// The metric recomputed from the stored records.
    pub fn recompute(&self) -> Result<f64, EvalError> {
        let refs: Vec<&FrameRecord> = self.records.iter().collect();
        metric_value(self.metric, &refs, &self.config)
    }

    pub fn with_breakdown(mut self, buckets: &Buckets) -> Result<Self, EvalError> {
        let b = aggregate(&self.records, buckets, self.metric, &self.config)?;
        self.breakdowns.push(b);
        Ok(self)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn save_json(&self, path: &Path) -> Result<(), EvalError> {
        std::fs::write(path, self.to_json()).map_err(|e| io_err(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        serde_path_to_error::deserialize(de).map_err(|e| EvalError::Schema {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })
    }

    /// One row per frame: id, success, matched truths, best IoU, max
    /// confidence, angle, distance.
    pub fn save_csv(&self, path: &Path) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record(["image_id", "success", "matched_truths", "best_iou", "max_confidence", "angle_deg", "distance_m"])
            .map_err(|e| csv_err(path, e))?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.records {
            w.write_record([
                r.image_id.clone(),
                r.success.to_string(),
                r.matched_truths.to_string(),
                r.best_iou.to_string(),
                r.max_confidence.to_string(),
                opt(r.angle_deg),
                opt(r.distance_m),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| io_err(path, e))
    }
}

fn io_err(path: &Path, source: std::io::Error) -> EvalError {
    EvalError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn csv_err(path: &Path, e: csv::Error) -> EvalError {
    io_err(path, std::io::Error::other(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BoundingBox, ClassLabel, LabeledBox};

    fn frame(id: &str, angle: f64, hit: bool) -> FrameRecord {
        let g = BoundingBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        let mut t = FrameTruth::new(id, vec![LabeledBox::person(g)]);
        t.angle_deg = Some(angle);
        let dets = if hit {
            vec![Detection {
                bbox: g,
                class: ClassLabel::PERSON,
                confidence: 0.9,
            }]
        } else {
            vec![]
        };
        FrameRecord::new(dets, t, &EvalConfig::default())
    }

    #[test]
    fn two_buckets_average_to_half() {
        let recs = vec![frame("a", -90.0, false), frame("b", 90.0, true)];
        let b = Buckets::uniform(MetadataAxis::Angle, -180.0, 180.0, 180.0).unwrap();
        let agg = aggregate(&recs, &b, MetricKind::Asr, &EvalConfig::default()).unwrap();
        assert_eq!(agg.buckets.len(), 2);
        assert_eq!(agg.mean, 0.5);
    }

    #[test]
    fn missing_metadata_lists_frames() {
        let mut r = frame("x", 0.0, true);
        r.truth.angle_deg = None;
        let b = Buckets::angles(90.0).unwrap();
        match aggregate(&[r], &b, MetricKind::Asr, &EvalConfig::default()) {
            Err(EvalError::MissingMetadata { frames, .. }) => assert_eq!(frames, vec!["x".to_string()]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bucket_edges_are_inclusive_at_the_top() {
        let b = Buckets::angles(90.0).unwrap();
        assert_eq!(b.len(), 4);
        assert_eq!(b.index(-180.0), Some(0));
        assert_eq!(b.index(180.0), Some(3));
        assert_eq!(b.index(0.0), Some(2));
        assert_eq!(b.index(181.0), None);
    }
}
