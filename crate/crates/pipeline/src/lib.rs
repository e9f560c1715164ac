//! IO, file formats, synthetic data generation and the frame-loop
//! orchestration around the `dmot-core` tracking algorithms.

pub mod formats;
pub mod overlay;
pub mod synth;
pub mod tracker;

use anyhow::Result;
use std::path::Path;

use formats::{FrameRecord, SequenceBundle};
use tracker::FrameInput;

/// Decode one frame of a sequence bundle. Multiple instance masks in
/// the id image become separate observations, ascending by id.
pub fn load_frame(bundle: &SequenceBundle, rec: &FrameRecord) -> Result<FrameInput> {
    let image = formats::load_image(&rec.image_path)?;
    let depth = formats::load_depth(&rec.depth_path)?;
    let masks = formats::load_masks(&rec.mask_path)?
        .into_iter()
        .map(|(_, m)| m)
        .collect();
    let _ = bundle;
    Ok(FrameInput {
        frame_id: rec.frame_id,
        image,
        depth,
        masks,
        detections_2d: rec.detections_2d.clone(),
        dims_prior: rec.dims_prior,
    })
}

/// Run the tracker over a whole sequence directory and return the final
/// (past-propagated) output rows.
pub fn run_sequence(
    root: &Path,
    cfg: formats::PipelineConfig,
) -> Result<Vec<formats::TrackOutput>> {
    let bundle = formats::load_sequence(root)?;
    let mut state = tracker::TrackerState::new(cfg, bundle.intrinsics);
    for rec in &bundle.frames {
        let input = load_frame(&bundle, rec)?;
        tracker::process_frame(&mut state, &input);
    }
    Ok(tracker::final_outputs(&state))
}
