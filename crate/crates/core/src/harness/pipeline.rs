//! Payload preparation and the cloud-side processing stage, shared by the
//! simulated and live runners.

use bytes::Bytes;

use super::scenario::{ScanFormat, ScenarioConfig};
use super::ScenarioError;
use crate::scanmodel::{
    cluster, downsample, expand, reference_scan, Calibration, CompactScan, DetectorConfig,
    ExpandedCloud, COMPACT_TYPE_TAG, EXPANDED_TYPE_TAG, OBJECTS_TYPE_TAG,
};

/// The message a scenario publishes every period.
#[derive(Debug, Clone)]
pub struct SamplePayload {
    pub type_tag: &'static str,
    pub value: Bytes,
    /// Points the cloud side has to produce when converting.
    pub points: usize,
}

pub fn prepare_payload(cfg: &ScenarioConfig) -> SamplePayload {
    let mut scan = reference_scan();
    if cfg.size_ratio < 1.0 {
        scan = downsample(&scan, cfg.size_ratio, cfg.seed);
    }
    let points = scan.valid_returns();
    match cfg.format {
        ScanFormat::Compact => SamplePayload {
            type_tag: COMPACT_TYPE_TAG,
            value: Bytes::from(scan.to_bytes()),
            points,
        },
        ScanFormat::Expanded => {
            let cloud = expand(&scan, &Calibration::vlp32c());
            SamplePayload {
                type_tag: EXPANDED_TYPE_TAG,
                value: Bytes::from(cloud.to_bytes()),
                points,
            }
        }
    }
}

/// Output of the processing stage.
#[derive(Debug, Clone)]
pub struct StageOutput {
    pub type_tag: String,
    pub value: Bytes,
    /// Points converted from compact form (0 when nothing was converted).
    pub converted_points: usize,
}

/// Converts the input to an expanded cloud when needed. Returns the cloud
/// and the number of converted points.
pub fn convert(type_tag: &str, value: &[u8]) -> Result<(ExpandedCloud, usize), ScenarioError> {
    let bad = |e: crate::scanmodel::ScanError| {
        ScenarioError::Aborted(format!("undecodable {type_tag} payload: {e}"))
    };
    match type_tag {
        t if t == COMPACT_TYPE_TAG => {
            let scan = CompactScan::from_bytes(value).map_err(bad)?;
            let cloud = expand(&scan, &Calibration::vlp32c());
            let n = cloud.points.len();
            Ok((cloud, n))
        }
        t if t == EXPANDED_TYPE_TAG => Ok((ExpandedCloud::from_bytes(value).map_err(bad)?, 0)),
        other => Err(ScenarioError::Aborted(format!(
            "detector cannot handle type `{other}`"
        ))),
    }
}

/// Clusters `cloud` without the emulated compute delay.
pub fn objects_of(cloud: &ExpandedCloud, cfg: &DetectorConfig) -> Bytes {
    Bytes::from(cluster(cloud, cfg).to_bytes())
}

/// Full stage without any waiting; loop-through forwards the input.
pub fn process(
    type_tag: &str,
    value: &Bytes,
    loop_through: bool,
    cfg: &DetectorConfig,
) -> Result<StageOutput, ScenarioError> {
    if loop_through {
        return Ok(StageOutput {
            type_tag: type_tag.into(),
            value: value.clone(),
            converted_points: 0,
        });
    }
    let (cloud, converted_points) = convert(type_tag, value)?;
    Ok(StageOutput {
        type_tag: OBJECTS_TYPE_TAG.into(),
        value: objects_of(&cloud, cfg),
        converted_points,
    })
}
