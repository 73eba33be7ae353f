use std::ops::Range;

use crate::error::{Error, Result};

/// `T x C x H x W` stack of frames, frame-major, row-major within a frame.
///
/// Storage range is `[0, 1]`; [`to_model_space`] maps to `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameClip {
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl FrameClip {
    pub fn new(frames: usize, channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        let expected = frames * channels * height * width;
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "clip {frames}x{channels}x{height}x{width} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(FrameClip {
            frames,
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(frames: usize, channels: usize, height: usize, width: usize) -> Self {
        FrameClip {
            frames,
            channels,
            height,
            width,
            data: vec![0.0; frames * channels * height * width],
        }
    }

    pub fn from_frames(channels: usize, height: usize, width: usize, frames: &[Vec<f32>]) -> Result<Self> {
        let mut data = Vec::with_capacity(frames.len() * channels * height * width);
        for f in frames {
            if f.len() != channels * height * width {
                return Err(Error::Shape(format!(
                    "frame has {} values, expected {}",
                    f.len(),
                    channels * height * width
                )));
            }
            data.extend_from_slice(f);
        }
        FrameClip::new(frames.len(), channels, height, width, data)
    }

    pub fn frame_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn frame_mut(&mut self, i: usize) -> &mut [f32] {
        let n = self.frame_len();
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.frames, self.channels, self.height, self.width]
    }

    pub fn same_frame_shape(&self, other: &FrameClip) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    pub fn slice(&self, range: Range<usize>) -> Result<Self> {
        if range.start > range.end || range.end > self.frames {
            return Err(Error::Size(format!(
                "frame range {range:?} outside clip of {} frames",
                self.frames
            )));
        }
        let n = self.frame_len();
        FrameClip::new(
            range.len(),
            self.channels,
            self.height,
            self.width,
            self.data[range.start * n..range.end * n].to_vec(),
        )
    }

    pub fn concat(clips: &[&FrameClip]) -> Result<Self> {
        let first = clips
            .first()
            .ok_or_else(|| Error::Size("concat of zero clips".into()))?;
        let mut data = Vec::with_capacity(clips.iter().map(|c| c.data.len()).sum());
        let mut frames = 0;
        for c in clips {
            if !c.same_frame_shape(first) {
                return Err(Error::Shape(format!(
                    "cannot concat {:?} with {:?}",
                    c.dims(),
                    first.dims()
                )));
            }
            data.extend_from_slice(&c.data);
            frames += c.frames;
        }
        FrameClip::new(frames, first.channels, first.height, first.width, data)
    }

    pub fn to_model_space(&self) -> Vec<f32> {
        self.data.iter().map(|v| v * 2.0 - 1.0).collect()
    }

    pub fn from_model_space(
        frames: usize,
        channels: usize,
        height: usize,
        width: usize,
        values: &[f32],
    ) -> Result<Self> {
        let data = values.iter().map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0)).collect();
        FrameClip::new(frames, channels, height, width, data)
    }
}
