//! Clip data model: per-participant motion tracks split into face, body and
//! hand parameter groups, and the paired speaker/listener clip.

use std::fmt;
use std::str::FromStr;

use ndarray::{concatenate, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureSequence, IdentityCode};

/// Expression coefficients per frame.
pub const FACE_DIM: usize = 50;
/// Pose channels per frame, shared between body and hand.
pub const POSE_DIM: usize = 156;
pub const SHAPE_PARAMS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Speaker,
    Listener,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Speaker => "speaker",
            Role::Listener => "listener",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Face,
    Body,
    Hand,
}

impl Part {
    pub const ALL: [Part; 3] = [Part::Face, Part::Body, Part::Hand];

    pub fn name(self) -> &'static str {
        match self {
            Part::Face => "face",
            Part::Body => "body",
            Part::Hand => "hand",
        }
    }
}

/// Channel counts of each part. Body and hand split the 156 pose channels,
/// body first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartDims {
    pub face: usize,
    pub body: usize,
    pub hand: usize,
}

impl Default for PartDims {
    fn default() -> Self {
        Self {
            face: FACE_DIM,
            body: 63,
            hand: 93,
        }
    }
}

impl PartDims {
    pub fn get(&self, part: Part) -> usize {
        match part {
            Part::Face => self.face,
            Part::Body => self.body,
            Part::Hand => self.hand,
        }
    }

    pub fn total(&self) -> usize {
        self.face + self.body + self.hand
    }
}

/// One of the five token streams modelled by the generator, in their fixed
/// within-step order. The speaker face is regressed, not tokenized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stream {
    #[serde(rename = "speaker.body")]
    SpeakerBody,
    #[serde(rename = "speaker.hand")]
    SpeakerHand,
    #[serde(rename = "listener.face")]
    ListenerFace,
    #[serde(rename = "listener.body")]
    ListenerBody,
    #[serde(rename = "listener.hand")]
    ListenerHand,
}

impl Stream {
    pub const ALL: [Stream; 5] = [
        Stream::SpeakerBody,
        Stream::SpeakerHand,
        Stream::ListenerFace,
        Stream::ListenerBody,
        Stream::ListenerHand,
    ];
    pub const COUNT: usize = 5;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Stream {
        Self::ALL[i]
    }

    pub fn role(self) -> Role {
        match self {
            Stream::SpeakerBody | Stream::SpeakerHand => Role::Speaker,
            _ => Role::Listener,
        }
    }

    pub fn part(self) -> Part {
        match self {
            Stream::ListenerFace => Part::Face,
            Stream::SpeakerBody | Stream::ListenerBody => Part::Body,
            Stream::SpeakerHand | Stream::ListenerHand => Part::Hand,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stream::SpeakerBody => "speaker.body",
            Stream::SpeakerHand => "speaker.hand",
            Stream::ListenerFace => "listener.face",
            Stream::ListenerBody => "listener.body",
            Stream::ListenerHand => "listener.hand",
        }
    }
}

impl fmt::Display for Stream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stream {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stream::ALL.into_iter().find(|st| st.name() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown stream {s:?}; expected one of speaker.body, speaker.hand, \
                     listener.face, listener.body, listener.hand"
            ))
        })
    }
}

/// Per-frame parameters of one participant, each part stored `(channels, frames)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    pub role: Role,
    pub face: Array2<f32>,
    pub body: Array2<f32>,
    pub hand: Array2<f32>,
}

impl MotionSequence {
    pub fn new(role: Role, face: Array2<f32>, body: Array2<f32>, hand: Array2<f32>) -> Result<Self> {
        let t = face.ncols();
        if body.ncols() != t || hand.ncols() != t {
            return Err(Error::shape(
                role.name(),
                format!(
                    "parts disagree on frame count: face {t}, body {}, hand {}",
                    body.ncols(),
                    hand.ncols()
                ),
            ));
        }
        if face.nrows() == 0 || body.nrows() == 0 || hand.nrows() == 0 {
            return Err(Error::shape(role.name(), "every part needs at least one channel"));
        }
        Ok(Self { role, face, body, hand })
    }

    pub fn zeros(role: Role, dims: PartDims, frames: usize) -> Self {
        Self {
            role,
            face: Array2::zeros((dims.face, frames)),
            body: Array2::zeros((dims.body, frames)),
            hand: Array2::zeros((dims.hand, frames)),
        }
    }

    pub fn num_frames(&self) -> usize {
        self.face.ncols()
    }

    pub fn dims(&self) -> PartDims {
        PartDims {
            face: self.face.nrows(),
            body: self.body.nrows(),
            hand: self.hand.nrows(),
        }
    }

    pub fn part(&self, part: Part) -> &Array2<f32> {
        match part {
            Part::Face => &self.face,
            Part::Body => &self.body,
            Part::Hand => &self.hand,
        }
    }

    pub fn part_mut(&mut self, part: Part) -> &mut Array2<f32> {
        match part {
            Part::Face => &mut self.face,
            Part::Body => &mut self.body,
            Part::Hand => &mut self.hand,
        }
    }

    /// The pose channels: body rows followed by hand rows.
    pub fn pose(&self) -> Array2<f32> {
        concatenate(Axis(0), &[self.body.view(), self.hand.view()]).expect("parts share T")
    }

    /// Face, body and hand rows stacked.
    pub fn full(&self) -> Array2<f32> {
        concatenate(Axis(0), &[self.face.view(), self.body.view(), self.hand.view()]).expect("parts share T")
    }
}

/// An aligned speaker/listener pair with the shared verbal features.
#[derive(Debug, Clone, PartialEq)]
pub struct DyadicClip {
    pub clip_id: String,
    pub fps: f64,
    pub speaker_id: usize,
    pub num_identities: usize,
    pub speaker: MotionSequence,
    pub listener: MotionSequence,
    pub features: FeatureSequence,
    pub shape_params: [f32; SHAPE_PARAMS],
    pub camera_pose: [f32; 3],
    pub translation: [f32; 3],
    /// Audio onset frames used by beat consistency; derived from the energy
    /// track when absent.
    pub audio_onsets: Option<Vec<usize>>,
}

impl DyadicClip {
    pub fn num_frames(&self) -> usize {
        self.speaker.num_frames()
    }

    pub fn identity(&self) -> Result<IdentityCode> {
        IdentityCode::new(self.speaker_id, self.num_identities)
    }

    pub fn motion(&self, role: Role) -> &MotionSequence {
        match role {
            Role::Speaker => &self.speaker,
            Role::Listener => &self.listener,
        }
    }

    pub fn track(&self, role: Role, part: Part) -> &Array2<f32> {
        self.motion(role).part(part)
    }

    pub fn stream_track(&self, stream: Stream) -> &Array2<f32> {
        self.track(stream.role(), stream.part())
    }

    /// Cross-checks every track against the speaker frame count.
    pub fn validate(&self) -> Result<()> {
        let t = self.num_frames();
        let mut bad = Vec::new();
        for role in [Role::Speaker, Role::Listener] {
            for part in Part::ALL {
                let n = self.track(role, part).ncols();
                if n != t {
                    bad.push(format!("{}.{}={n}", role.name(), part.name()));
                }
            }
        }
        for (name, n) in self.features.track_lengths() {
            if n != t {
                bad.push(format!("features.{name}={n}"));
            }
        }
        if !bad.is_empty() {
            return Err(Error::Consistency {
                clip_id: self.clip_id.clone(),
                tracks: format!("expected {t} frames; {}", bad.join(", ")),
            });
        }
        if self.speaker_id >= self.num_identities {
            return Err(Error::InvalidInput(format!(
                "clip {}: speaker_id {} outside [0, {})",
                self.clip_id, self.speaker_id, self.num_identities
            )));
        }
        Ok(())
    }
}
