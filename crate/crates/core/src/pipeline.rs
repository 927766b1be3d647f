//! Inference composition: detect corruption masks, then restore with the
//! detected masks guiding the decoder.

use crate::detector::{detect_masks, Detection, DetectorConfig};
use crate::error::Result;
use crate::image::Image;
use crate::network::{decode_restore, encode, NetworkConfig, ParamSet};
use crate::tensor::Tape;

pub struct RestorationResult {
    /// Composed output: input pixels kept where detected uncorrupted.
    pub restored: Image,
    /// Fully synthesized content before composition.
    pub content: Image,
    pub detection: Detection,
}

pub fn detect_and_restore(
    input: &Image,
    params: &ParamSet,
    net: &NetworkConfig,
    det: &DetectorConfig,
    seed: u64,
) -> Result<RestorationResult> {
    let detection = detect_masks(input, params, net, det, seed)?;
    let mut tape = Tape::new();
    let bp = params.bind(&mut tape);
    let enc = encode(&mut tape, input, net, &bp)?;
    let (content, restored) = decode_restore(
        &mut tape,
        &enc,
        [
            &detection.multi.masks[0],
            &detection.multi.masks[1],
            &detection.multi.masks[2],
        ],
        input,
        net,
        &bp,
    )?;
    let to_image = |data: &[f64]| Image {
        channels: input.channels,
        height: input.height,
        width: input.width,
        data: data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
    };
    let restored = to_image(tape.data(restored));
    let content = to_image(tape.data(content));
    Ok(RestorationResult {
        restored,
        content,
        detection,
    })
}
